import json
import logging
import os

import numpy as np
import pandas as pd

from errors import OutputError

logger = logging.getLogger(__name__)


def seeded_generators(seed: int, *streams: str) -> dict[str, np.random.Generator]:
    """Returns one independent Generator per named stream, all derived from a single seed."""
    children = np.random.SeedSequence(seed).spawn(len(streams))
    return {name: np.random.default_rng(child) for name, child in zip(streams, children)}


def ensure_parent_dir(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        try:
            os.makedirs(parent, exist_ok=True)
        except OSError as e:
            raise OutputError(f"Cannot create directory for {path}: {e}") from e


def write_csv(df: pd.DataFrame, path: str, **kwargs) -> str:
    """Write a DataFrame as CSV without the index, naming the path on failure."""
    ensure_parent_dir(path)
    try:
        df.to_csv(path, index=False, **kwargs)
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from e
    logger.info(f"Saved {path} ({len(df)} rows)")
    return path


def write_json_lines(rows: list[dict], path: str) -> str:
    """Write one JSON object per line; column order follows the first row."""
    ensure_parent_dir(path)
    df = pd.DataFrame.from_records(rows)
    try:
        df.to_json(path, orient="records", lines=True, double_precision=15)
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from e
    logger.info(f"Saved {path} ({len(df)} rows)")
    return path


def write_json(payload, path: str, **kwargs) -> str:
    ensure_parent_dir(path)
    try:
        with open(path, "w") as f:
            json.dump(payload, f, **kwargs)
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from e
    logger.info(f"Saved {path}")
    return path
