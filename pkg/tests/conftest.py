import json

import numpy as np
import pytest

from harness import load_datasets, make_config, train_teacher

TINY = {
    "num_classes": 4,
    "per_class": 20,
    "test_per_class": 8,
    "input_dim": 2,
    "spread": 0.05,
    "teacher_hidden": [16],
    "student_hidden": [4],
    "embedding_dim": 4,
    "batch_size": 8,
    "samples_per_class": 2,
    "num_superclasses": 4,
    "epochs": 2,
    "teacher_epochs": 3,
    "decay_epochs": [1],
    "heldout_batches": 2,
    "seed": 3,
}


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config(tmp_path):
    return make_config(TINY, {"output_dir": str(tmp_path / "run")})


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def tiny_data(tiny_config):
    return load_datasets(tiny_config)


@pytest.fixture
def tiny_teacher(tiny_config, tiny_data):
    train, test = tiny_data
    teacher, _ = train_teacher(tiny_config, train, test)
    return teacher
