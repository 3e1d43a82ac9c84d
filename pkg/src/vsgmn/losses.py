"""Alignment losses and their weighted total.

Class scores are dot products ``s_i . z_c`` between embeddings and
(standardized) class prototypes.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, TrainingDivergenceError

TERMS = ("ace", "reg", "sc", "crc")


@dataclass(frozen=True)
class LossWeights:
    reg: float = 1.0
    sc: float = 0.1
    crc: float = 1.0

    def __post_init__(self):
        for name in ("reg", "sc", "crc"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")


def class_scores(s, prototypes):
    return ad.as_tensor(s) @ Tensor(np.asarray(prototypes, dtype=np.float64).T)


def calibration_indicator(classes, unseen_classes):
    """+1 for unseen classes, -1 for seen ones."""
    return np.where(np.isin(classes, unseen_classes), 1.0, -1.0)


def loss_reg(s, z):
    """Mean squared L2 distance between embeddings and their prototypes."""
    s, z = ad.as_tensor(s), ad.as_tensor(z)
    if s.shape != z.shape:
        raise ContractError(f"embeddings {s.shape} and prototypes {z.shape} differ in shape")
    r = s - z
    return (r * r).sum(axis=1).mean()


def loss_ace(s, labels, prototypes, class_pool):
    """Cross-entropy of prototype scores restricted to ``class_pool``."""
    labels = np.asarray(labels, dtype=np.int64)
    pool = np.asarray(class_pool, dtype=np.int64)
    position = {int(c): i for i, c in enumerate(pool)}
    missing = [int(y) for y in labels if int(y) not in position]
    if missing:
        raise ContractError(f"labels {sorted(set(missing))} are not in the class pool")
    logp = ad.log_softmax(class_scores(s, np.asarray(prototypes)[pool]))
    picked = logp[np.arange(len(labels)), [position[int(y)] for y in labels]]
    return -picked.mean()


def loss_sc(s, prototypes, seen_classes, unseen_classes):
    """Self-calibration: log-mass pushed onto unseen classes by a +-1 score offset."""
    seen = np.asarray(seen_classes, dtype=np.int64)
    unseen = np.asarray(unseen_classes, dtype=np.int64)
    if seen.size == 0 or unseen.size == 0:
        raise ConfigError("self-calibration needs non-empty seen and unseen class sets")
    classes = np.concatenate([seen, unseen])
    offset = calibration_indicator(classes, unseen)
    logp = ad.log_softmax(class_scores(s, np.asarray(prototypes)[classes]) + offset)
    n = ad.as_tensor(s).shape[0]
    return -(logp[:, seen.size:].sum() * (1.0 / n))


def _check_stochastic(p, what):
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    if data.ndim != 2 or np.any(data < 0) or not np.allclose(data.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise ContractError(f"{what} rows are not probability distributions")


def kl_rows(p, q):
    """Sum over rows of KL(p_i || q_i).

    Each row's divergence is clipped at zero so round-off on near-identical
    rows cannot make it negative; the true gradient vanishes there anyway.
    """
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    return ad.relu((p * (ad.log(p) - ad.log(q))).sum(axis=-1)).sum()


def loss_crc(state):
    """Per-node KL from semantic to visual relation distributions, summed over layers."""
    pairs = list(zip(state.semantic_distributions, state.visual_distributions))
    if not pairs:
        raise ContractError("relation loss needs at least one distribution pair")
    total, n = None, pairs[0][0].shape[0]
    for p_s, p_v in pairs:
        _check_stochastic(p_s, "semantic relation")
        _check_stochastic(p_v, "visual relation")
        term = kl_rows(p_s, p_v)
        total = term if total is None else total + term
    return total * (1.0 / n)


def _value(x):
    return x.item() if isinstance(x, Tensor) else float(x)


def check_finite(components):
    """Raise ``TrainingDivergenceError`` naming the first non-finite term."""
    for term in TERMS:
        if term in components and not math.isfinite(_value(components[term])):
            raise TrainingDivergenceError(term, _value(components[term]))


def loss_total(components, weights):
    """``ace + reg_w*reg + sc_w*sc + crc_w*crc``; missing terms count as zero."""
    check_finite(components)
    total = components["ace"]
    for term in ("reg", "sc", "crc"):
        w = getattr(weights, term)
        if term in components and w != 0:
            total = total + w * components[term]
    if not isinstance(total, Tensor):
        total = Tensor(total)
    return total
