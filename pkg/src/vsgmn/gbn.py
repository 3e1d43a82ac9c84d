"""Graph build stage: visual prototypes, virtual unseen features, embedding, graphs.

Visual prototypes and virtual unseen features depend only on the frozen input
features, so they are computed once per dataset.  The embedding network and the
visual adjacency are recomputed on the tape for every batch.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .errors import ConfigError, ContractError, DatasetError, DimensionError


@dataclass(frozen=True)
class VisualPrototypeTable:
    classes: np.ndarray      # seen class ids, ascending
    prototypes: np.ndarray   # len(classes) x F
    counts: np.ndarray


def _exact_column_mean(rows):
    # sorting each column first makes the sum independent of sample order
    return np.sort(rows, axis=0).sum(axis=0) / rows.shape[0]


def compute_visual_prototypes(ds):
    """Per seen class, the mean training feature vector."""
    classes = np.sort(ds.seen_classes)
    train = ds.train_instances
    train_labels = ds.labels[train]
    protos, counts = [], []
    for c in classes:
        rows = ds.features[train[train_labels == c]]
        if rows.shape[0] == 0:
            raise DatasetError(f"seen class {int(c)} has no training samples")
        protos.append(_exact_column_mean(rows))
        counts.append(rows.shape[0])
    return VisualPrototypeTable(classes, np.array(protos), np.array(counts))


def semantic_neighbors(raw_prototypes, seen_classes, unseen_class, top_k):
    """The ``top_k`` seen classes most cosine-similar to ``unseen_class``.

    Ties break towards the lower class id.
    """
    seen = np.sort(np.asarray(seen_classes))
    z = np.asarray(raw_prototypes, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1)
    norms = np.where(norms < ad.EPS_NORM, 1.0, norms)
    sims = (z[seen] @ z[unseen_class]) / (norms[seen] * norms[unseen_class])
    order = np.lexsort((seen, -sims))
    return seen[order[:top_k]]


def generate_virtual_unseen_features(protos, semantics, unseen_classes, top_k):
    """One synthetic visual feature per unseen class.

    Each is the mean visual prototype of the ``top_k`` seen classes whose raw
    semantic prototypes are closest in cosine similarity.
    """
    n_seen = len(protos.classes)
    if not 1 <= top_k <= n_seen:
        raise ConfigError(f"top_k={top_k} must lie in [1, C_s={n_seen}]")
    raw = semantics.raw if hasattr(semantics, "raw") else np.asarray(semantics)
    position = {int(c): i for i, c in enumerate(protos.classes)}
    rows = []
    for u in unseen_classes:
        nbrs = semantic_neighbors(raw, protos.classes, int(u), top_k)
        rows.append(protos.prototypes[[position[int(c)] for c in nbrs]].mean(axis=0))
    if not rows:
        return np.zeros((0, protos.prototypes.shape[1]))
    return np.array(rows)


def assemble_batch(sample_rows, sample_class_ids, virtual_rows, unseen_classes):
    sample_rows = np.asarray(sample_rows, dtype=np.float64)
    virtual_rows = np.asarray(virtual_rows, dtype=np.float64)
    unseen_classes = np.asarray(unseen_classes, dtype=np.int64).reshape(-1)
    n_real, n_virtual = len(sample_rows), len(unseen_classes)
    if virtual_rows.shape[0] != n_virtual:
        raise ContractError(
            f"expected {n_virtual} virtual rows (one per unseen class), got {virtual_rows.shape[0]}"
        )
    if len(sample_class_ids) != n_real:
        raise ContractError("one class id per sample row is required")
    width = sample_rows.shape[1] if n_real else virtual_rows.shape[1]
    rows = np.vstack([sample_rows.reshape(n_real, width), virtual_rows.reshape(n_virtual, width)])
    ids = np.concatenate([np.asarray(sample_class_ids, dtype=np.int64), unseen_classes])
    flags = np.arange(n_real + n_virtual) >= n_real
    return Batch(rows, ids, flags)


# -- embedding networks ---------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EmbeddingNetwork:
    """Maps B x F visual features to B x K semantic embeddings.

    Subclasses set ``input_dim``/``output_dim``, keep their tensors in
    ``self.params`` and implement ``forward``.
    """

    kind = "base"

    def __init__(self, input_dim, output_dim):
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.params = {}

    def parameters(self):
        return dict(self.params)

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"embedding expects inputs of width {self.input_dim}, got shape {x.shape}"
            )
        return self.forward(x)


class MLPEmbedding(EmbeddingNetwork):
    """``relu(x W1 + b1) W2 + b2``."""

    kind = "mlp"

    def __init__(self, input_dim, output_dim, hidden_dim=None, rng=None):
        super().__init__(input_dim, output_dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden_dim = hidden_dim or 4 * output_dim
        self.hidden_dim = hidden_dim
        self.params = {
            "w1": ad.parameter(_uniform(rng, (input_dim, hidden_dim), input_dim), "w1"),
            "b1": ad.parameter(_uniform(rng, (hidden_dim,), input_dim), "b1"),
            "w2": ad.parameter(_uniform(rng, (hidden_dim, output_dim), hidden_dim), "w2"),
            "b2": ad.parameter(_uniform(rng, (output_dim,), hidden_dim), "b2"),
        }

    def forward(self, x):
        p = self.params
        return ad.relu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


class LinearEmbedding(EmbeddingNetwork):
    kind = "linear"

    def __init__(self, input_dim, output_dim, rng=None, identity=False):
        super().__init__(input_dim, output_dim)
        if identity:
            w = np.eye(input_dim, output_dim)
            b = np.zeros(output_dim)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            w = _uniform(rng, (input_dim, output_dim), input_dim)
            b = _uniform(rng, (output_dim,), input_dim)
        self.params = {"w": ad.parameter(w, "w"), "b": ad.parameter(b, "b")}

    def forward(self, x):
        return x @ self.params["w"] + self.params["b"]


def embed(net, batch):
    rows = batch.rows if isinstance(batch, Batch) else batch
    return net(Tensor(rows) if not isinstance(rows, Tensor) else rows)


# -- graphs ------------------------------------------------------------------------

@dataclass
class BuiltGraphs:
    visual_nodes: Tensor
    semantic_nodes: Tensor
    adjacency_visual: Tensor
    adjacency_semantic: Tensor
    adjacency_masked: Tensor
    n_real: int
    n_virtual: int


def cosine_adjacency(nodes):
    unit = ad.l2_normalize_rows(nodes)
    return unit @ unit.T


def apply_virtual_mask(adj, n_real, n_virtual):
    """Zero the columns of virtual nodes: they receive messages but never send."""
    adj = ad.as_tensor(adj)
    n = n_real + n_virtual
    if adj.shape != (n, n):
        raise ContractError(f"adjacency of shape {adj.shape} does not match {n_real}+{n_virtual} nodes")
    keep = np.broadcast_to(np.arange(n) < n_real, (n, n))
    return ad.where(keep, adj, 0.0)


def build_graphs(embeddings, matched_prototypes, n_virtual=0):
    """Cosine-similarity adjacencies of the visual and semantic node sets.

    ``matched_prototypes`` row i is the (standardized) prototype of batch row
    i's class; the last ``n_virtual`` rows are virtual unseen nodes.
    """
    emb = ad.as_tensor(embeddings)
    protos = ad.as_tensor(matched_prototypes)
    if emb.ndim != 2 or emb.shape != protos.shape:
        raise ContractError(
            f"embeddings {emb.shape} and matched prototypes {protos.shape} must be equal-shape matrices"
        )
    n_real = emb.shape[0] - n_virtual
    if n_real < 0:
        raise ContractError(f"{n_virtual} virtual rows exceed the {emb.shape[0]} batch rows")
    adj_v = cosine_adjacency(emb)
    adj_s = cosine_adjacency(protos)
    return BuiltGraphs(
        visual_nodes=emb,
        semantic_nodes=protos,
        adjacency_visual=adj_v,
        adjacency_semantic=adj_s,
        adjacency_masked=apply_virtual_mask(adj_v, n_real, n_virtual),
        n_real=n_real,
        n_virtual=n_virtual,
    )
