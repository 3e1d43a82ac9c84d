"""Zero-shot datasets: containers, on-disk format, synthetic generation, sampling.

A dataset directory holds four files::

    features.csv     N x F decimal doubles, comma separated, no header
    labels.csv       N x 1 integer class ids
    prototypes.csv   C_total x K semantic prototypes
    split.json       {"seen_classes": [...], "unseen_classes": [...],
                      "train_instances": [...], "test_instances": [...]}
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import EPS_NORM
from .errors import ConfigError, IngestionError, ParseError, ValidationError

log = logging.getLogger(__name__)

SPLIT_KEYS = ("seen_classes", "unseen_classes", "train_instances", "test_instances")


def _index_array(values):
    return np.asarray(values, dtype=np.int64).reshape(-1)


@dataclass(frozen=True)
class ZslDataset:
    features: np.ndarray
    labels: np.ndarray
    prototypes: np.ndarray
    seen_classes: np.ndarray
    unseen_classes: np.ndarray
    train_instances: np.ndarray
    test_instances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "prototypes", np.asarray(self.prototypes, dtype=np.float64))
        for name in ("labels",) + SPLIT_KEYS:
            object.__setattr__(self, name, _index_array(getattr(self, name)))
        for name in ("features", "labels", "prototypes") + SPLIT_KEYS:
            getattr(self, name).flags.writeable = False

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def attr_dim(self):
        return self.prototypes.shape[1]

    @property
    def n_classes(self):
        return self.prototypes.shape[0]

    def validate(self):
        """Check every structural invariant; raise ValidationError on the first violation."""
        if self.features.ndim != 2 or self.prototypes.ndim != 2:
            raise ValidationError("features and prototypes must be matrices")
        n = self.n_samples
        if self.labels.shape[0] != n:
            raise ValidationError(f"{self.labels.shape[0]} labels for {n} feature rows")
        seen, unseen = set(self.seen_classes.tolist()), set(self.unseen_classes.tolist())
        if len(seen) != len(self.seen_classes) or len(unseen) != len(self.unseen_classes):
            raise ValidationError("duplicate class ids in seen/unseen class lists")
        if seen & unseen:
            raise ValidationError(f"seen and unseen classes overlap: {sorted(seen & unseen)}")
        classes = seen | unseen
        if classes != set(range(self.n_classes)):
            raise ValidationError(
                f"prototypes has {self.n_classes} rows but seen/unseen classes cover {sorted(classes)}"
            )
        bad = np.flatnonzero(~np.isin(self.labels, sorted(classes))).tolist()
        if bad:
            raise ValidationError("labels outside the seen/unseen class split", rows=bad)
        for name in ("train_instances", "test_instances"):
            idx = getattr(self, name)
            out = idx[(idx < 0) | (idx >= n)].tolist()
            if out:
                raise ValidationError(f"{name} references rows outside [0, {n})", rows=out)
        overlap = np.intersect1d(self.train_instances, self.test_instances).tolist()
        if overlap:
            raise ValidationError("train and test instances overlap", rows=overlap)
        train_labels = self.labels[self.train_instances]
        bad = self.train_instances[~np.isin(train_labels, self.seen_classes)].tolist()
        if bad:
            raise ValidationError("training instances labeled with non-seen classes", rows=bad)
        return self


@dataclass(frozen=True)
class Batch:
    """Real seen-class rows stacked on top of one virtual row per unseen class."""

    rows: np.ndarray
    class_ids: np.ndarray
    virtual_flags: np.ndarray

    @property
    def n_real(self):
        return int((~self.virtual_flags).sum())

    @property
    def n_virtual(self):
        return int(self.virtual_flags.sum())

    def __len__(self):
        return self.rows.shape[0]


@dataclass(frozen=True)
class SemanticPrototypeSet:
    raw: np.ndarray
    standardized: np.ndarray
    normalized: np.ndarray
    mean: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)


def standardize_prototypes(raw, seen_classes=None):
    """Per-attribute z-scoring with statistics from the seen-class rows only.

    Constant columns (over the seen rows) map to zero everywhere.
    """
    raw = np.asarray(raw, dtype=np.float64)
    ref = raw if seen_classes is None else raw[_index_array(seen_classes)]
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(constant, 1.0, std)
    standardized = np.where(constant, 0.0, (raw - mean) / scale)
    norm = np.linalg.norm(standardized, axis=1, keepdims=True)
    normalized = standardized / np.where(norm < EPS_NORM, 1.0, norm)
    return SemanticPrototypeSet(raw, standardized, normalized, mean, scale)


# -- file format ---------------------------------------------------------------

def _read_matrix(path, dtype=float):
    if not path.is_file():
        raise IngestionError(f"missing dataset file: {path}")
    rows, width = [], None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not c.strip() for c in record):
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise ParseError(f"expected {width} columns, found {len(record)}", path, lineno)
            try:
                rows.append([dtype(c) for c in record])
            except ValueError as exc:
                raise ParseError(f"bad value ({exc})", path, lineno) from exc
    if not rows:
        return np.zeros((0, 0), dtype=np.float64 if dtype is float else np.int64)
    return np.array(rows, dtype=np.float64 if dtype is float else np.int64)


def load_dataset(path):
    """Read and validate a dataset directory."""
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"dataset directory not found: {path}")
    features = _read_matrix(path / "features.csv")
    labels = _read_matrix(path / "labels.csv", dtype=int)
    prototypes = _read_matrix(path / "prototypes.csv")
    if labels.size and labels.shape[1] != 1:
        raise ParseError(f"labels must have one column, found {labels.shape[1]}", path / "labels.csv")
    split_path = path / "split.json"
    if not split_path.is_file():
        raise IngestionError(f"missing dataset file: {split_path}")
    try:
        split = json.loads(split_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), split_path, exc.lineno) from exc
    missing = [k for k in SPLIT_KEYS if k not in split]
    if missing:
        raise ParseError(f"split.json lacks keys {missing}", split_path)
    ds = ZslDataset(features, labels.reshape(-1), prototypes, **{k: split[k] for k in SPLIT_KEYS})
    return ds.validate()


def write_dataset(ds, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.savetxt(path / "features.csv", ds.features, fmt="%.17g", delimiter=",")
    np.savetxt(path / "labels.csv", ds.labels.reshape(-1, 1), fmt="%d", delimiter=",")
    np.savetxt(path / "prototypes.csv", ds.prototypes, fmt="%.17g", delimiter=",")
    split = {k: getattr(ds, k).tolist() for k in SPLIT_KEYS}
    (path / "split.json").write_text(json.dumps(split), encoding="utf-8")
    return path


# -- synthetic data ----------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_seen: int = 15
    n_unseen: int = 5
    attr_dim: int = 12
    feature_dim: int = 32
    samples_per_class: int = 30
    noise_scale: float = 0.2
    test_fraction: float = 0.2
    seed: int = 7


def generate_synthetic_dataset(cfg=None, **overrides):
    """Spherical class prototypes pushed through a fixed random linear map plus noise.

    Classes ``0..n_seen-1`` are seen, the rest unseen.  A ``test_fraction`` of
    every seen class is held out; all unseen samples are test instances.
    """
    cfg = cfg or SyntheticConfig()
    if overrides:
        cfg = SyntheticConfig(**{**cfg.__dict__, **overrides})
    if cfg.n_seen < 2 or cfg.n_unseen < 1 or cfg.attr_dim < 2:
        raise ConfigError("synthetic data needs n_seen >= 2, n_unseen >= 1, attr_dim >= 2")
    if cfg.feature_dim < 1 or cfg.samples_per_class < 1 or cfg.noise_scale < 0:
        raise ConfigError("feature_dim and samples_per_class must be positive, noise_scale >= 0")
    if not 0 <= cfg.test_fraction < 1:
        raise ConfigError("test_fraction must lie in [0, 1)")

    rng = np.random.default_rng(cfg.seed)
    n_classes = cfg.n_seen + cfg.n_unseen
    z = rng.standard_normal((n_classes, cfg.attr_dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    mapping = rng.standard_normal((cfg.feature_dim, cfg.attr_dim)) / np.sqrt(cfg.attr_dim)

    labels = np.repeat(np.arange(n_classes), cfg.samples_per_class)
    noise = rng.standard_normal((labels.size, cfg.feature_dim))
    features = z[labels] @ mapping.T + cfg.noise_scale * noise

    n_test = int(round(cfg.test_fraction * cfg.samples_per_class))
    train, test = [], []
    for c in range(n_classes):
        rows = np.flatnonzero(labels == c)
        if c >= cfg.n_seen:
            test.extend(rows.tolist())
            continue
        rows = rng.permutation(rows)
        cut = cfg.samples_per_class - n_test
        train.extend(sorted(rows[:cut].tolist()))
        test.extend(sorted(rows[cut:].tolist()))
    ds = ZslDataset(
        features=features,
        labels=labels,
        prototypes=z,
        seen_classes=np.arange(cfg.n_seen),
        unseen_classes=np.arange(cfg.n_seen, n_classes),
        train_instances=sorted(train),
        test_instances=sorted(test),
    )
    return ds.validate()


# -- balanced sampling ----------------------------------------------------------------

class BalancedBatchSampler:
    """Batches of training indices with at most one sample per seen class.

    Each epoch visits every training instance exactly once.  Classes with the
    most unvisited samples are served first, so an epoch needs
    ``max(class size, ceil(N / n_b))`` batches; the tail batches shrink once
    fewer than ``n_b`` classes have samples left.
    """

    def __init__(self, ds, n_b, seed=0):
        n_seen = len(ds.seen_classes)
        if n_b < 1 or n_b > n_seen:
            raise ConfigError(f"batch size n_b={n_b} must lie in [1, C_s={n_seen}]")
        self.n_b = n_b
        self.rng = np.random.default_rng(seed)
        train = ds.train_instances
        train_labels = ds.labels[train]
        self._by_class = [
            train[train_labels == c] for c in ds.seen_classes if np.any(train_labels == c)
        ]

    def epoch(self):
        queues = [list(self.rng.permutation(rows)) for rows in self._by_class]
        batches = []
        while True:
            alive = [i for i, q in enumerate(queues) if q]
            if not alive:
                return batches
            ties = dict(zip(alive, self.rng.random(len(alive))))
            alive.sort(key=lambda k: (-len(queues[k]), ties[k]))
            chosen = alive[: self.n_b]
            batches.append(np.array([queues[k].pop() for k in chosen], dtype=np.int64))

    def __iter__(self):
        while True:
            yield from self.epoch()


def balanced_batch_sampler(ds, n_b, seed=0):
    return BalancedBatchSampler(ds, n_b, seed)
