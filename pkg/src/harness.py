"""
Experiment orchestration: datasets, configuration, teacher training, student
distillation under the ce / kd / mimic / cckd loss modes, and evaluation.

A run is fully determined by its ExperimentConfig: model initialisation,
samplers and synthetic data each draw from their own stream spawned from
cfg.seed.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import pandas as pd

from analysis import intra_inter_stats
from correlation_kernels import KernelConfig
from distill_losses import (
    INSTANCE_LOSSES,
    LOSS_MODES,
    LossBreakdown,
    LossWeights,
    cc_loss,
    cross_entropy,
    distillation_objective,
)
from errors import ConfigurationError, DivergenceError, MissingStatisticError, RejectedInputError
from nn_core import MlpModel, OptimizerState, build_mlp, mlp_backward, mlp_forward, save_checkpoint, sgd_momentum_step
from samplers import EpochSampler, SamplerConfig, cur_sample, export_superclasses
from utils import seeded_generators, write_json, write_json_lines

logger = logging.getLogger(__name__)

HELDOUT_PER_CLASS = 4
MAX_MEAN_DRAWS = 100_000


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise RejectedInputError(
                f"{self.split}: {self.features.shape} features do not match {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise RejectedInputError(f"{self.split}: labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise RejectedInputError(f"{self.split}: feature rows must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_width(self) -> int:
        return self.features.shape[1]


@dataclass
class ExperimentConfig:
    # data: synthetic unless train_csv is given
    train_csv: str | None = None
    test_csv: str | None = None
    num_classes: int = 10
    per_class: int = 500
    test_per_class: int = 100
    input_dim: int = 2
    spread: float = 0.04
    # minimum distance between class means, in units of spread
    separation: float = 12.0
    # models
    teacher_hidden: tuple[int, ...] = (128, 128)
    student_hidden: tuple[int, ...] = (8,)
    embedding_dim: int = 16
    # objective
    loss_mode: str = "cckd"
    instance_loss: str = "kd"
    alpha: float = 0.0
    beta: float = 5.0
    tau: float = 4.0
    kernel: str = "rbf_taylor"
    gamma: float = 0.4
    order: int = 2
    normalize_rows: bool | None = None
    # sampler
    sampler: str = "cur"
    batch_size: int = 40
    samples_per_class: int = 4
    num_superclasses: int = 10
    kmeans_iters: int = 50
    # optimisation
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple[int, ...] = (20, 25)
    decay_factor: float = 0.1
    epochs: int = 30
    teacher_epochs: int = 30
    # measurement
    heldout_batches: int = 10
    seed: int = 0
    output_dir: str = "data/experiments"

    def __post_init__(self):
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigurationError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"Unknown loss_mode '{self.loss_mode}', expected one of {LOSS_MODES}")
        if self.instance_loss not in INSTANCE_LOSSES:
            raise ConfigurationError(f"Unknown instance_loss '{self.instance_loss}', expected one of {INSTANCE_LOSSES}")
        if self.epochs < 0 or self.teacher_epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.spread < 0 or self.separation < 0:
            raise ConfigurationError(f"spread and separation must be nonnegative, got {self.spread} and {self.separation}")
        # building these validates them
        self.loss_weights
        self.kernel_config
        self.sampler_config

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, tau=self.tau)

    @property
    def kernel_config(self) -> KernelConfig:
        return KernelConfig(kind=self.kernel, gamma=self.gamma, order=self.order, normalize_rows=self.normalize_rows)

    @property
    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            strategy=self.sampler,
            batch_size=self.batch_size,
            per_class=self.samples_per_class,
            num_superclasses=self.num_superclasses,
            kmeans_iters=self.kmeans_iters,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("teacher_hidden", "student_hidden", "decay_epochs"):
            d[name] = list(d[name])
        return d

    def teacher_settings(self) -> dict:
        d = self.to_dict()
        return {name: d[name] for name in TEACHER_FIELDS}


_TUPLE_FIELDS = {"teacher_hidden", "student_hidden", "decay_epochs"}
# everything load_datasets and train_teacher read; runs agreeing on these share a teacher
TEACHER_FIELDS = (
    "train_csv", "test_csv", "num_classes", "per_class", "test_per_class", "input_dim", "spread", "separation",
    "teacher_hidden", "embedding_dim", "batch_size", "learning_rate", "momentum", "weight_decay",
    "decay_epochs", "decay_factor", "teacher_epochs", "seed",
)


def _coerce(name: str, value, default):
    """Convert a JSON or command-line value to the type of the field's default."""
    if name in _TUPLE_FIELDS:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(int(v) for v in value)
    if name == "normalize_rows":
        if value is None or (isinstance(value, str) and value.lower() in ("", "none", "auto")):
            return None
    if isinstance(default, bool) or name == "normalize_rows":
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"expected a boolean, got '{value}'")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return None if value is None else str(value)


def make_config(base: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed config file plus key/value overrides."""
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    values = {}
    for source in (base or {}, overrides or {}):
        for key, value in source.items():
            name = key.replace("-", "_")
            if name not in defaults:
                raise ConfigurationError(f"Unknown config key '{key}'")
            try:
                values[name] = _coerce(name, value, defaults[name])
            except (TypeError, ValueError) as e:
                raise ConfigurationError(f"Bad value for {key}: {e}") from e
    return ExperimentConfig(**values)


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    base = {}
    if path:
        try:
            with open(path) as f:
                base = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    return make_config(base, overrides)


@dataclass
class Accuracy:
    top1: float
    top5: float | None = None


@dataclass
class MetricsRecord:
    run_id: str
    epochs: list[dict] = field(default_factory=list)
    batches: list[LossBreakdown] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def write(self, path: str) -> str:
        return write_json_lines(self.epochs, path)

    def write_final(self, path: str) -> str:
        return write_json({"run_id": self.run_id, **self.final}, path)


def place_class_means(num_classes: int, input_dim: int, min_gap: float, rng: np.random.Generator) -> np.ndarray:
    """
    Draw class means uniformly in [-1, 1]^input_dim, rejecting any candidate
    closer than min_gap to a mean already placed.
    """
    means = np.empty((0, input_dim))
    for _ in range(MAX_MEAN_DRAWS):
        if len(means) == num_classes:
            return means
        candidate = rng.uniform(-1.0, 1.0, size=input_dim)
        if len(means) == 0 or np.linalg.norm(means - candidate, axis=1).min() >= min_gap:
            means = np.vstack([means, candidate])
    if len(means) == num_classes:
        return means
    raise ConfigurationError(
        f"Could not place {num_classes} class means at least {min_gap:.3g} apart in [-1, 1]^{input_dim} "
        f"(placed {len(means)}); lower spread or separation"
    )


def gen_synthetic(
    num_classes: int,
    per_class: int,
    input_dim: int,
    spread: float,
    seed: int,
    test_per_class: int | None = None,
    separation: float = 12.0,
) -> tuple[Dataset, Dataset]:
    """
    Gaussian class clusters around seeded means in [-1, 1]^input_dim; train and
    test are separate draws. Means are at least separation * spread apart.
    """
    if min(num_classes, per_class, input_dim) < 1 or spread < 0 or separation < 0:
        raise RejectedInputError("gen_synthetic parameters must be positive")
    if test_per_class is None:
        test_per_class = max(1, per_class // 5)
    rng = seeded_generators(seed, "data")["data"]
    means = place_class_means(num_classes, input_dim, separation * spread, rng)

    def draw(count: int, split: str) -> Dataset:
        labels = np.repeat(np.arange(num_classes), count)
        features = means[labels] + spread * rng.standard_normal((len(labels), input_dim))
        return Dataset(features, labels, num_classes, split)

    return draw(per_class, "train"), draw(test_per_class, "test")


def load_dataset(path: str, split: str = "train") -> Dataset:
    """CSV of numeric feature columns and a final integer label column; the header row is optional."""
    try:
        raw = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=True)
    except pd.errors.EmptyDataError as e:
        raise RejectedInputError(f"{path} is empty") from e
    except pd.errors.ParserError as e:
        raise RejectedInputError(f"{path}: malformed row ({e})") from e
    except OSError as e:
        raise RejectedInputError(f"Cannot read {path}: {e}") from e

    first_line = 1
    if raw.shape[0] and pd.to_numeric(raw.iloc[0], errors="coerce").isna().all():
        raw = raw.iloc[1:]
        first_line = 2
    if raw.empty:
        raise RejectedInputError(f"{path} has no data rows")
    if raw.shape[1] < 2:
        raise RejectedInputError(f"{path} needs at least one feature column and a label column")

    features = raw.iloc[:, :-1].apply(pd.to_numeric, errors="coerce")
    bad = features.isna().any(axis=1).to_numpy() | raw.iloc[:, :-1].isna().any(axis=1).to_numpy()
    if bad.any():
        line = first_line + int(np.flatnonzero(bad)[0])
        raise RejectedInputError(f"{path}: malformed row at line {line}")

    label_text = raw.iloc[:, -1].str.strip()
    labels = pd.to_numeric(label_text, errors="coerce")
    non_integer = labels.isna() | (labels != labels.round()) | (labels < 0)
    if non_integer.any():
        line = first_line + int(np.flatnonzero(non_integer.to_numpy())[0])
        raise RejectedInputError(f"{path}: label at line {line} is not a nonnegative integer")

    labels = labels.astype(np.int64).to_numpy()
    class_count = int(labels.max()) + 1
    absent = sorted(set(range(class_count)) - set(labels.tolist()))
    if absent:
        logger.warning(f"{path}: classes {absent} have no examples")
    logger.info(f"Loaded {len(labels)} rows from {path} ({class_count} classes)")
    return Dataset(features.to_numpy(dtype=np.float64), labels, class_count, split)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.train_csv:
        train = load_dataset(cfg.train_csv, "train")
        test = load_dataset(cfg.test_csv, "test") if cfg.test_csv else train
        class_count = max(train.class_count, test.class_count)
        train.class_count = test.class_count = class_count
        return train, test
    return gen_synthetic(
        cfg.num_classes, cfg.per_class, cfg.input_dim, cfg.spread, cfg.seed, cfg.test_per_class, cfg.separation
    )


def learning_rate_at(epoch: int, cfg: ExperimentConfig) -> float:
    """Step schedule: initial * factor^i once the i-th decay epoch has been reached."""
    passed = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.learning_rate * cfg.decay_factor**passed


def evaluate(model: MlpModel, dataset: Dataset) -> Accuracy:
    if dataset.input_width != model.input_width:
        raise RejectedInputError(
            f"Dataset has {dataset.input_width} features, model expects {model.input_width}"
        )
    logits = mlp_forward(model, dataset.features).logits
    labels = dataset.labels
    top1 = float(np.mean(logits.argmax(axis=1) == labels))
    top5 = None
    if model.num_classes > 5:
        # stable ordering keeps ties deterministic
        ranked = np.argsort(-logits, axis=1, kind="stable")[:, :5]
        top5 = float(np.mean(np.any(ranked == labels[:, None], axis=1)))
    return Accuracy(top1, top5)


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"{what} diverged (loss={value}) in epoch {epoch}; lower the learning rate")


def _epoch_means(batches: list[LossBreakdown]) -> dict:
    frame = pd.DataFrame([b.as_dict() for b in batches])
    means = frame.mean(numeric_only=True)
    return {col: (None if col not in means or pd.isna(means[col]) else float(means[col])) for col in frame.columns}


def train_teacher(
    cfg: ExperimentConfig, train: Dataset, test: Dataset, output_dir: str | None = None
) -> tuple[MlpModel, MetricsRecord]:
    """Train the teacher with cross-entropy only, uniform random batches and the lr schedule."""
    streams = seeded_generators(cfg.seed, "teacher_init", "teacher_sampler")
    teacher = build_mlp(train.input_width, cfg.teacher_hidden, cfg.embedding_dim, train.class_count, streams["teacher_init"])
    sampler = EpochSampler(replace(cfg.sampler_config, strategy="ur"), train.labels, streams["teacher_sampler"])
    state = OptimizerState.for_model(teacher, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    record = MetricsRecord(run_id=f"teacher-seed{cfg.seed}")

    for epoch in range(cfg.teacher_epochs):
        state.learning_rate = learning_rate_at(epoch, cfg)
        epoch_batches = []
        for batch in sampler.plan_epoch():
            forward = mlp_forward(teacher, train.features[batch])
            ce, grad_logits = cross_entropy(forward.logits, train.labels[batch])
            _check_finite(ce, "Teacher training", epoch)
            sgd_momentum_step(teacher, mlp_backward(teacher, forward, grad_logits), state)
            epoch_batches.append(LossBreakdown(ce=ce, kd=0.0, cc=0.0, total=ce))

        accuracy = evaluate(teacher, test)
        means = _epoch_means(epoch_batches)
        record.epochs.append({
            "epoch": epoch + 1, "lr": state.learning_rate, "ce": means["ce"], "total": means["total"],
            "test_top1": accuracy.top1, "test_top5": accuracy.top5,
        })
        logger.info(f"teacher epoch {epoch + 1}/{cfg.teacher_epochs}: ce={means['ce']:.4f} top1={accuracy.top1:.4f}")

    accuracy = evaluate(teacher, test)
    record.final = {"test_top1": accuracy.top1, "test_top5": accuracy.top5}
    if output_dir:
        save_checkpoint(teacher, os.path.join(output_dir, "teacher.json"))
        record.write(os.path.join(output_dir, "teacher_metrics.jsonl"))
    return teacher, record


def heldout_batches(cfg: ExperimentConfig, test: Dataset) -> list[np.ndarray]:
    """A fixed set of class-uniform test batches for measuring correlation congruence."""
    # fixed k=4 so ablations over the training sampler are measured on the same batches
    b = cfg.batch_size
    if b % HELDOUT_PER_CLASS or len(np.unique(test.labels)) < b // HELDOUT_PER_CLASS or len(test) < b:
        logger.warning("Test set too small for class-uniform held-out batches; using the whole test set once")
        return [np.arange(len(test))]
    sampler_cfg = SamplerConfig(strategy="cur", batch_size=b, per_class=HELDOUT_PER_CLASS, seed=cfg.seed)
    rng = seeded_generators(cfg.seed, "heldout")["heldout"]
    return cur_sample(test.labels, sampler_cfg, rng).batches[: cfg.heldout_batches]


def measure_heldout_cc(student: MlpModel, teacher: MlpModel, test: Dataset, batches, kernel: KernelConfig) -> float:
    values = []
    for batch in batches:
        x = test.features[batch]
        cc, _ = cc_loss(mlp_forward(student, x).embeddings, mlp_forward(teacher, x).embeddings, kernel)
        values.append(cc)
    return float(np.mean(values))


def distill_student(
    cfg: ExperimentConfig, teacher: MlpModel, train: Dataset, test: Dataset, output_dir: str | None = None
) -> tuple[MlpModel, MetricsRecord]:
    """Train a student against a frozen teacher under cfg.loss_mode."""
    if teacher.embedding_width != cfg.embedding_dim:
        raise ConfigurationError(
            f"Teacher embedding width {teacher.embedding_width} differs from student embedding width {cfg.embedding_dim}"
        )
    streams = seeded_generators(cfg.seed, "student_init", "student_sampler")
    student = build_mlp(train.input_width, cfg.student_hidden, cfg.embedding_dim, train.class_count, streams["student_init"])
    sampler = EpochSampler(cfg.sampler_config, train.labels, streams["student_sampler"], teacher, train.features)
    if sampler.assignment is not None and output_dir:
        export_superclasses(sampler.assignment, os.path.join(output_dir, "superclasses.csv"))

    state = OptimizerState.for_model(student, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    weights, kernel = cfg.loss_weights, cfg.kernel_config
    measure = heldout_batches(cfg, test)
    run_id = f"{cfg.loss_mode}-seed{cfg.seed}"
    record = MetricsRecord(run_id=run_id)

    for epoch in range(cfg.epochs):
        state.learning_rate = learning_rate_at(epoch, cfg)
        epoch_batches = []
        for batch in sampler.plan_epoch():
            x, y = train.features[batch], train.labels[batch]
            teacher_forward = mlp_forward(teacher, x)
            student_forward = mlp_forward(student, x)
            breakdown, grad_logits, grad_embeddings = distillation_objective(
                student_forward, teacher_forward, y, weights, kernel, cfg.loss_mode, cfg.instance_loss
            )
            _check_finite(breakdown.total, "Distillation", epoch)
            gradients = mlp_backward(student, student_forward, grad_logits, grad_embeddings)
            sgd_momentum_step(student, gradients, state)
            epoch_batches.append(breakdown)

        record.batches.extend(epoch_batches)
        accuracy = evaluate(student, test)
        means = _epoch_means(epoch_batches)
        row = {"epoch": epoch + 1, "lr": state.learning_rate, **means}
        row.update({
            "test_top1": accuracy.top1,
            "test_top5": accuracy.top5,
            "heldout_cc": measure_heldout_cc(student, teacher, test, measure, kernel),
        })
        record.epochs.append(row)
        logger.info(
            f"{run_id} epoch {epoch + 1}/{cfg.epochs}: total={means['total']:.4f} kd={means['kd']:.4f} "
            f"cc={means['cc']:.6f} top1={accuracy.top1:.4f}"
        )

    record.final = summarize_student(student, teacher, test, measure, kernel)
    if output_dir:
        save_checkpoint(student, os.path.join(output_dir, "student.json"))
        record.write(os.path.join(output_dir, "metrics.jsonl"))
        record.write_final(os.path.join(output_dir, "final.json"))
    return student, record


def summarize_student(student: MlpModel, teacher: MlpModel, test: Dataset, measure, kernel: KernelConfig) -> dict:
    accuracy = evaluate(student, test)
    summary = {
        "test_top1": accuracy.top1,
        "test_top5": accuracy.top5,
        "heldout_cc": measure_heldout_cc(student, teacher, test, measure, kernel),
    }
    try:
        stats = intra_inter_stats(mlp_forward(student, test.features).embeddings, test.labels)
        summary.update({"mean_intra": stats.mean_intra, "mean_inter": stats.mean_inter})
    except MissingStatisticError as e:
        logger.warning(f"Similarity statistics unavailable: {e}")
    return summary
