"""Training loop, calibrated zero-shot prediction, CZSL/GZSL evaluation, sweeps."""

import itertools
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import balanced_batch_sampler, standardize_prototypes
from .errors import ConfigError, ContractError
from .gbn import (
    LinearEmbedding,
    MLPEmbedding,
    assemble_batch,
    build_graphs,
    compute_visual_prototypes,
    embed,
    generate_virtual_unseen_features,
)
from .gmn import (
    AttentionLayerParams,
    PropagationBranchParams,
    PropagationLayerParams,
    VARIANTS,
    direct_relations,
    init_layers,
    run_gmn,
)
from .losses import (
    LossWeights,
    calibration_indicator,
    check_finite,
    loss_ace,
    loss_crc,
    loss_reg,
    loss_sc,
    loss_total,
)

log = logging.getLogger(__name__)

# Rows of the component ablation table: (gmn layers on, relation loss on, mask, cross-graph)
ABLATIONS = {
    "baseline": dict(use_gmn=False, use_crc=False, mask_enabled=False, cross_graph_enabled=False),
    "crc_only": dict(use_gmn=False, use_crc=True, mask_enabled=False, cross_graph_enabled=False),
    "gm": dict(use_gmn=True, use_crc=True, mask_enabled=False, cross_graph_enabled=False),
    "gm_um": dict(use_gmn=True, use_crc=True, mask_enabled=True, cross_graph_enabled=False),
    "gm_cg": dict(use_gmn=True, use_crc=True, mask_enabled=False, cross_graph_enabled=True),
    "full": dict(use_gmn=True, use_crc=True, mask_enabled=True, cross_graph_enabled=True),
}


@dataclass
class TrainConfig:
    max_iter: int = 50
    batch_size: int = 0            # 0 -> one sample of every seen class per batch
    top_k: int = 3
    gmn_layers: int = 2
    variant: str = "attention"
    temperature: float = 10.0
    cross_weight: float = 1.0
    message_dim: int = 0           # 0 -> attribute dimension
    hidden_dim: int = 0            # 0 -> 4 x attribute dimension
    embedding: str = "mlp"
    lambda_reg: float = 1.0
    lambda_sc: float = 0.1
    lambda_crc: float = 1.0
    ace_pool: str = "seen"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    mask_enabled: bool = True
    cross_graph_enabled: bool = True
    virtual_enabled: bool = True
    gamma: float = 1.0

    def validate(self):
        if self.max_iter < 1:
            raise ConfigError("max_iter must be positive")
        if self.batch_size < 0 or self.top_k < 1 or self.gmn_layers < 0:
            raise ConfigError("batch_size, top_k and gmn_layers must be non-negative (top_k >= 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.embedding not in ("mlp", "linear"):
            raise ConfigError(f"embedding must be 'mlp' or 'linear', got {self.embedding!r}")
        if self.ace_pool not in ("seen", "all"):
            raise ConfigError(f"ace_pool must be 'seen' or 'all', got {self.ace_pool!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        self.weights()
        ad.SgdState(self.learning_rate, self.momentum, self.weight_decay)
        return self

    def weights(self):
        return LossWeights(self.lambda_reg, self.lambda_sc, self.lambda_crc)

    def with_ablation(self, name):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        row = ABLATIONS[name]
        cfg = replace(self, mask_enabled=row["mask_enabled"], cross_graph_enabled=row["cross_graph_enabled"])
        if not row["use_gmn"]:
            cfg = replace(cfg, gmn_layers=0)
        elif cfg.gmn_layers == 0:
            cfg = replace(cfg, gmn_layers=TrainConfig.gmn_layers)
        if not row["use_crc"]:
            cfg = replace(cfg, lambda_crc=0.0)
        elif cfg.lambda_crc == 0:
            cfg = replace(cfg, lambda_crc=TrainConfig.lambda_crc)
        return cfg

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        casted = {}
        for k, v in values.items():
            default = getattr(cls, k)
            try:
                if isinstance(default, bool):
                    casted[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    casted[k] = int(v)
                elif isinstance(default, float):
                    casted[k] = float(v)
                else:
                    casted[k] = str(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {v!r}") from exc
        return cls(**casted)


# -- model ----------------------------------------------------------------------------

class VsgmnModel:
    """Embedding network plus graph matching layers."""

    def __init__(self, embedding, layers, trained=False):
        self.embedding = embedding
        self.layers = layers
        self.trained = trained

    @classmethod
    def initialize(cls, feature_dim, attr_dim, cfg, rng):
        if cfg.embedding == "linear":
            net = LinearEmbedding(feature_dim, attr_dim, rng=rng)
        else:
            net = MLPEmbedding(feature_dim, attr_dim, hidden_dim=cfg.hidden_dim or None, rng=rng)
        layers = init_layers(
            cfg.variant, cfg.gmn_layers, attr_dim, rng,
            temperature=cfg.temperature, cross_weight=cfg.cross_weight,
            message_dim=cfg.message_dim or None,
        )
        return cls(net, layers)

    def named_parameters(self):
        out = {f"embedding.{k}": v for k, v in self.embedding.parameters().items()}
        for i, layer in enumerate(self.layers):
            out.update({f"gmn.{i}.{k}": v for k, v in layer.parameters().items()})
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def embed_features(self, features):
        return self.embedding(Tensor(features)).data

    def save(self, path, extra=None):
        arrays = {k: v.data for k, v in self.named_parameters().items()}
        meta = {
            "embedding": self.embedding.kind,
            "input_dim": self.embedding.input_dim,
            "output_dim": self.embedding.output_dim,
            "layers": [
                {"variant": l.variant, **({"temperature": l.temperature, "cross_weight": l.cross_weight}
                                           if l.variant == "attention" else {})}
                for l in self.layers
            ],
            "trained": self.trained,
            **(extra or {}),
        }
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(str(f["__meta__"]))
            arrays = {k: f[k] for k in f.files if k != "__meta__"}
        if meta["embedding"] == "linear":
            net = LinearEmbedding(meta["input_dim"], meta["output_dim"])
        else:
            hidden = arrays["embedding.w1"].shape[1]
            net = MLPEmbedding(meta["input_dim"], meta["output_dim"], hidden_dim=hidden)
        for k, t in net.params.items():
            t.data = arrays[f"embedding.{k}"]
        layers = []
        for i, spec in enumerate(meta["layers"]):
            get = lambda name, i=i: ad.parameter(arrays[f"gmn.{i}.{name}"])
            if spec["variant"] == "attention":
                layers.append(AttentionLayerParams(get("projection"), spec["temperature"], spec["cross_weight"]))
            else:
                branches = {}
                for side in ("visual", "semantic"):
                    names = [f.name for f in fields(PropagationBranchParams)]
                    branches[side] = PropagationBranchParams(**{n: get(f"{side}.{n}") for n in names})
                layers.append(PropagationLayerParams(branches["visual"], branches["semantic"]))
        model = cls(net, layers, trained=meta["trained"])
        return model, meta


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainingContext:
    """Per-dataset quantities that stay fixed during training."""

    semantics: object
    virtual_rows: np.ndarray
    unseen_classes: np.ndarray
    seen_classes: np.ndarray
    ace_pool: np.ndarray


def prepare(ds, cfg):
    semantics = standardize_prototypes(ds.prototypes, ds.seen_classes)
    seen = np.sort(ds.seen_classes)
    unseen = np.sort(ds.unseen_classes)
    if cfg.virtual_enabled and unseen.size:
        visual = compute_visual_prototypes(ds)
        virtual = generate_virtual_unseen_features(visual, semantics, unseen, cfg.top_k)
        virtual_classes = unseen
    else:
        virtual = np.zeros((0, ds.feature_dim))
        virtual_classes = np.zeros(0, dtype=np.int64)
    pool = seen if cfg.ace_pool == "seen" else np.arange(ds.n_classes)
    return TrainingContext(semantics, virtual, virtual_classes, seen, pool)


def batch_losses(model, batch, ctx, cfg, unseen_classes):
    """Loss components for one assembled batch (recorded on the active tape)."""
    z = ctx.semantics.standardized
    s = embed(model.embedding, batch)
    n_real = batch.n_real
    s_real = s[:n_real]
    labels = batch.class_ids[:n_real]
    comps = {
        "ace": loss_ace(s_real, labels, z, ctx.ace_pool),
        "reg": loss_reg(s_real, Tensor(z[labels])),
    }
    if len(unseen_classes):
        comps["sc"] = loss_sc(s_real, z, ctx.seen_classes, unseen_classes)
    # diverged embeddings make the graphs degenerate; report the loss term instead
    check_finite(comps)
    if model.layers or cfg.lambda_crc > 0:
        graphs = build_graphs(s, z[batch.class_ids], n_virtual=batch.n_virtual)
        if model.layers:
            state = run_gmn(graphs, model.layers, mask=cfg.mask_enabled, cross=cfg.cross_graph_enabled)
        else:
            state = direct_relations(graphs)
        comps["crc"] = loss_crc(state)
    return comps


@dataclass
class TrainResult:
    model: VsgmnModel
    trace: list = field(default_factory=list)
    config: TrainConfig = None


def train(ds, cfg=None, callback=None):
    """Optimise the embedding and matching layers; returns the model and a per-epoch trace."""
    cfg = (cfg or TrainConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    n_b = cfg.batch_size or len(ds.seen_classes)
    ctx = prepare(ds, cfg)
    model = VsgmnModel.initialize(ds.feature_dim, ds.attr_dim, cfg, rng)
    params = model.parameters()
    opt = ad.SgdState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    sampler = balanced_batch_sampler(ds, n_b, seed=cfg.seed)
    weights = cfg.weights()
    unseen = np.sort(ds.unseen_classes)

    trace = []
    for epoch in range(1, cfg.max_iter + 1):
        sums = dict.fromkeys(("ace", "reg", "sc", "crc", "total"), 0.0)
        batches = sampler.epoch()
        for idx in batches:
            batch = assemble_batch(ds.features[idx], ds.labels[idx], ctx.virtual_rows, ctx.unseen_classes)
            with Tape() as tape:
                comps = batch_losses(model, batch, ctx, cfg, unseen)
                total = loss_total(comps, weights)
            grads = ad.backward(tape, total, wrt=params)
            ad.sgd_step(params, grads, opt)
            for k, v in comps.items():
                sums[k] += v.item()
            sums["total"] += total.item()
        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        trace.append(row)
        log.info("epoch %d total %.6g", epoch, row["total"])
        if callback is not None:
            callback(row)
    model.trained = True
    return TrainResult(model, trace, cfg)


# -- prediction and metrics ----------------------------------------------------------------

def predict(model, features, prototypes, seen_classes, unseen_classes, mode="czsl", gamma=1.0):
    """Calibrated argmax of ``s . z_c + gamma * (+1 unseen / -1 seen)`` over the candidate pool."""
    if not getattr(model, "trained", False):
        raise ContractError("predict needs a trained model")
    mode = mode.lower()
    unseen = np.sort(np.asarray(unseen_classes, dtype=np.int64))
    if mode == "czsl":
        pool = unseen
    elif mode == "gzsl":
        pool = np.sort(np.concatenate([np.asarray(seen_classes, dtype=np.int64), unseen]))
    else:
        raise ConfigError(f"mode must be 'czsl' or 'gzsl', got {mode!r}")
    s = model.embed_features(np.asarray(features, dtype=np.float64))
    return calibrated_argmax(s, np.asarray(prototypes)[pool], pool, unseen, gamma)


def calibrated_argmax(s, pool_prototypes, pool, unseen_classes, gamma=1.0):
    scores = s @ pool_prototypes.T + gamma * calibration_indicator(pool, unseen_classes)
    # np.argmax returns the first maximum: ties go to the lower class id
    return pool[np.argmax(scores, axis=1)]


def predict_dataset(model, ds, mode="czsl", gamma=1.0):
    """Predictions aligned with ``ds.test_instances``."""
    semantics = standardize_prototypes(ds.prototypes, ds.seen_classes)
    return predict(
        model, ds.features[ds.test_instances], semantics.standardized,
        ds.seen_classes, ds.unseen_classes, mode=mode, gamma=gamma,
    )


def harmonic_mean(seen_acc, unseen_acc):
    total = seen_acc + unseen_acc
    return 2.0 * seen_acc * unseen_acc / total if total > 0 else 0.0


@dataclass
class GzslMetrics:
    mode: str
    per_class_acc: dict
    acc_czsl: float = None
    U: float = None
    S: float = None
    H: float = None

    def to_dict(self):
        out = asdict(self)
        out["per_class_acc"] = {str(k): v for k, v in self.per_class_acc.items()}
        return out


def per_class_accuracy(y_true, y_pred, classes):
    """Top-1 accuracy per class; classes with no samples are left out with a warning."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    out = {}
    for c in classes:
        hit = y_true == c
        if not hit.any():
            warnings.warn(f"class {int(c)} has no test samples; excluded from the mean", stacklevel=2)
            continue
        out[int(c)] = float(np.mean(y_pred[hit] == c))
    return out


def _class_mean(acc, classes):
    vals = [acc[int(c)] for c in classes if int(c) in acc]
    return float(np.mean(vals)) if vals else 0.0


def zsl_metrics(y_true, y_pred, seen_classes, unseen_classes, mode="gzsl"):
    """Class-balanced accuracies from aligned true/predicted label vectors."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    seen, unseen = np.sort(seen_classes), np.sort(unseen_classes)
    mode = mode.lower()
    if mode == "czsl":
        keep = np.isin(y_true, unseen)
        acc = per_class_accuracy(y_true[keep], y_pred[keep], unseen)
        return GzslMetrics("czsl", acc, acc_czsl=_class_mean(acc, unseen))
    if mode != "gzsl":
        raise ConfigError(f"mode must be 'czsl' or 'gzsl', got {mode!r}")
    acc = per_class_accuracy(y_true, y_pred, np.concatenate([seen, unseen]))
    s_acc, u_acc = _class_mean(acc, seen), _class_mean(acc, unseen)
    return GzslMetrics("gzsl", acc, U=u_acc, S=s_acc, H=harmonic_mean(s_acc, u_acc))


def evaluate(predictions, ds, mode="gzsl"):
    predictions = np.asarray(predictions)
    if predictions.shape[0] != ds.test_instances.shape[0]:
        raise ContractError(
            f"{predictions.shape[0]} predictions for {ds.test_instances.shape[0]} test instances"
        )
    return zsl_metrics(ds.labels[ds.test_instances], predictions, ds.seen_classes, ds.unseen_classes, mode)


def train_and_evaluate(ds, cfg):
    result = train(ds, cfg)
    czsl = evaluate(predict_dataset(result.model, ds, "czsl", cfg.gamma), ds, "czsl")
    gzsl = evaluate(predict_dataset(result.model, ds, "gzsl", cfg.gamma), ds, "gzsl")
    return result, czsl, gzsl


# -- grid search ------------------------------------------------------------------------

def grid_cells(grid):
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid must name at least one parameter with at least one value")
    names = list(grid)
    return [dict(zip(names, combo)) for combo in itertools.product(*(grid[n] for n in names))]


def _run_cell(ds, base_cfg, overrides):
    typed = TrainConfig.from_mapping(overrides)
    cfg = replace(base_cfg, **{k: getattr(typed, k) for k in overrides})
    result, czsl, gzsl = train_and_evaluate(ds, cfg)
    return {
        **{k: getattr(cfg, k) for k in overrides},
        "acc": czsl.acc_czsl, "U": gzsl.U, "S": gzsl.S, "H": gzsl.H,
        "final_loss": result.trace[-1]["total"],
    }


def sort_results(rows):
    def key(r):
        h = r.get("H")
        a = r.get("acc")
        return (-(h if h is not None and math.isfinite(h) else -1.0),
                -(a if a is not None and math.isfinite(a) else -1.0))
    return sorted(rows, key=key)


def sweep(ds, base_cfg, grid, jobs=1):
    """Train and evaluate every cell of the Cartesian grid; best H (then acc) first."""
    cells = grid_cells(grid)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, [ds] * len(cells), [base_cfg] * len(cells), cells))
    else:
        rows = [_run_cell(ds, base_cfg, cell) for cell in cells]
    return sort_results(rows)
