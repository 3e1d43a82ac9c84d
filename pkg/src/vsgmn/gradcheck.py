"""Central finite-difference checks for kernels and for the full training loss."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import balanced_batch_sampler, generate_synthetic_dataset
from .gbn import assemble_batch
from .train import TrainConfig, VsgmnModel, batch_losses, prepare
from .losses import loss_total

FD_EPS = 1e-5
KERNEL_TOL = 1e-6
MODEL_TOL = 1e-4


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)`` with a 1e-8 floor on the denominator."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


def numerical_gradient(f, tensor, eps=FD_EPS):
    """Central differences of scalar ``f()`` by perturbing ``tensor.data`` in place."""
    grad = np.zeros_like(tensor.data)
    flat, gflat = tensor.data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def _away_from_kink(rng, shape, low=0.1):
    x = rng.uniform(low, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def kernel_cases(rng):
    """name -> (inputs, fn) pairs; ``fn(*inputs)`` produces the tensor under test."""
    x = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    mask = rng.random((4, 5)) < 0.7
    mask[:, 0] = True
    return {
        "add": ([x(3, 4), x(1, 4)], ad.add),
        "sub": ([x(3, 4), x(3, 1)], ad.sub),
        "mul": ([x(3, 4), x(4)], ad.mul),
        "div": ([x(3, 4), pos(3, 4)], ad.div),
        "neg": ([x(3, 4)], ad.neg),
        "matmul": ([x(3, 4), x(4, 2)], ad.matmul),
        "transpose": ([x(3, 4)], ad.transpose),
        "relu": ([_away_from_kink(rng, (3, 4), 1e-3)], ad.relu),
        "exp": ([x(3, 4)], ad.exp),
        "log": ([pos(3, 4)], ad.log),
        "sqrt": ([pos(3, 4)], ad.sqrt),
        "sum": ([x(3, 4)], lambda a: ad.tsum(a, axis=1)),
        "mean": ([x(3, 4)], lambda a: ad.mean(a, axis=0, keepdims=True)),
        "reshape": ([x(3, 4)], lambda a: ad.reshape(a, (2, 6))),
        "getitem": ([x(5, 3)], lambda a: ad.getitem(a, np.array([0, 2, 2, 4]))),
        "masked_select": ([x(4, 5)], lambda a: ad.getitem(a, mask)),
        "concat": ([x(2, 3), x(4, 3)], lambda a, b: ad.concat([a, b], axis=0)),
        "concat_cols": ([x(3, 2), x(3, 5)], lambda a, b: ad.concat([a, b], axis=1)),
        "where": ([x(4, 5), x(4, 5)], lambda a, b: ad.where(mask, a, b)),
        "scalar_broadcast": ([x(3, 4)], lambda a: 2.5 * a + 1.0),
        "row_softmax": ([x(4, 5)], ad.row_softmax),
        "masked_row_softmax": ([x(4, 5)], lambda a: ad.row_softmax(a, mask=mask)),
        "log_softmax": ([x(4, 5)], ad.log_softmax),
        "l2_normalize_rows": ([x(4, 5)], ad.l2_normalize_rows),
        "layer_norm_rows": ([x(4, 5), x(5), x(5)], ad.layer_norm_rows),
        "layer_norm_3d": ([x(2, 3, 4), x(4), x(4)], ad.layer_norm_rows),
    }


def check_kernel(inputs, fn, rng, eps=FD_EPS):
    """Max relative error over inputs of the VJP against finite differences."""
    params = [ad.parameter(v) for v in inputs]
    with Tape() as tape:
        out = fn(*params)
    cot = rng.standard_normal(out.shape)
    grads = ad.backward_from(tape, out, cot, wrt=params)

    def f():
        return float(np.sum(fn(*[Tensor(p.data) for p in params]).data * cot))

    return max(relative_error(grads[p], numerical_gradient(f, p, eps)) for p in params)


def kernel_report(seed=0):
    rng = np.random.default_rng(seed)
    return {name: check_kernel(inputs, fn, rng) for name, (inputs, fn) in kernel_cases(rng).items()}


@dataclass
class ToyModelConfig:
    n_b: int = 4
    n_unseen: int = 3
    attr_dim: int = 6
    feature_dim: int = 8
    gmn_layers: int = 2
    seed: int = 0


@dataclass
class GradcheckReport:
    variant: str
    groups: dict = field(default_factory=dict)
    kernels: dict = field(default_factory=dict)

    def failures(self):
        bad = [f"param:{k}" for k, v in self.groups.items() if not v < MODEL_TOL]
        bad += [f"kernel:{k}" for k, v in self.kernels.items() if not v < KERNEL_TOL]
        return bad

    @property
    def passed(self):
        return not self.failures()


def model_gradcheck(variant="attention", toy=None, eps=FD_EPS, jitter=1e-2):
    """Relative error of dL_total/dtheta per named parameter group on a toy model.

    Parameters are jittered off their initial values first: zero-initialised
    layer-norm shifts can leave a dead propagation node exactly at the zero
    row, where unit-normalisation is discontinuous.
    """
    toy = toy or ToyModelConfig()
    ds = generate_synthetic_dataset(
        n_seen=toy.n_b, n_unseen=toy.n_unseen, attr_dim=toy.attr_dim,
        feature_dim=toy.feature_dim, samples_per_class=3, noise_scale=0.3, seed=toy.seed,
    )
    cfg = TrainConfig(
        variant=variant, gmn_layers=toy.gmn_layers, batch_size=toy.n_b, seed=toy.seed,
        lambda_reg=1.0, lambda_sc=0.5, lambda_crc=1.0, temperature=2.0,
    )
    ctx = prepare(ds, cfg)
    model = VsgmnModel.initialize(ds.feature_dim, ds.attr_dim, cfg, np.random.default_rng(toy.seed))
    idx = balanced_batch_sampler(ds, toy.n_b, seed=toy.seed).epoch()[0]
    batch = assemble_batch(ds.features[idx], ds.labels[idx], ctx.virtual_rows, ctx.unseen_classes)
    unseen = np.sort(ds.unseen_classes)
    weights = cfg.weights()

    def total():
        return loss_total(batch_losses(model, batch, ctx, cfg, unseen), weights)

    named = model.named_parameters()
    rng = np.random.default_rng(toy.seed + 1)
    for p in named.values():
        p.data = p.data + rng.uniform(-jitter, jitter, size=p.shape)
    with Tape() as tape:
        root = total()
    grads = ad.backward(tape, root, wrt=list(named.values()))
    return {
        name: relative_error(grads[p], numerical_gradient(lambda: total().item(), p, eps))
        for name, p in named.items()
    }


def run_gradcheck(variant="attention", toy=None, kernels=True):
    report = GradcheckReport(variant, model_gradcheck(variant, toy))
    if kernels:
        report.kernels = kernel_report()
    return report
