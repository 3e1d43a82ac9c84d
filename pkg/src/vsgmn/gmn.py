"""Two-branch graph matching layers over the visual and semantic graphs.

Each layer passes messages inside each graph along its (weighted, possibly
masked) adjacency, adds a cross-graph difference message between same-index
nodes, and updates the nodes.  After every layer both branches are summarised
by row-stochastic relation distributions, which the relation loss aligns.

The neighbour set of node i is ``{j : A[i, j] != 0}``.  The cosine adjacency
is dense, so in practice only masked virtual columns drop out.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateRowError

VARIANTS = ("attention", "propagation")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AttentionLayerParams:
    """Cosine attention with a projection shared by both branches."""

    projection: Tensor
    temperature: float = 10.0
    cross_weight: float = 1.0
    variant: str = field(default="attention", init=False)

    def parameters(self):
        return {"projection": self.projection}


@dataclass
class PropagationBranchParams:
    msg_weight: Tensor    # D x (2K + 1), acting on [h_i, h_j, e_ij]
    msg_bias: Tensor
    msg_gain: Tensor
    msg_shift: Tensor
    node_weight: Tensor   # K x (K + D + K), acting on [h_i, sum_j m_ji, h_i - h_i']
    node_bias: Tensor
    node_gain: Tensor
    node_shift: Tensor

    def parameters(self):
        return dict(self.__dict__)


@dataclass
class PropagationLayerParams:
    visual: PropagationBranchParams
    semantic: PropagationBranchParams
    variant: str = field(default="propagation", init=False)

    def parameters(self):
        out = {f"visual.{k}": v for k, v in self.visual.parameters().items()}
        out.update({f"semantic.{k}": v for k, v in self.semantic.parameters().items()})
        return out


def init_attention_layer(dim, rng, temperature=10.0, cross_weight=1.0, noise=1e-2):
    w = np.eye(dim) + rng.uniform(-noise, noise, size=(dim, dim))
    return AttentionLayerParams(ad.parameter(w, "projection"), temperature, cross_weight)


def _init_branch(dim, message_dim, rng):
    msg_in, node_in = 2 * dim + 1, 2 * dim + message_dim
    return PropagationBranchParams(
        msg_weight=ad.parameter(_uniform(rng, (message_dim, msg_in), msg_in)),
        msg_bias=ad.parameter(_uniform(rng, (message_dim,), msg_in)),
        msg_gain=ad.parameter(np.ones(message_dim)),
        msg_shift=ad.parameter(np.zeros(message_dim)),
        node_weight=ad.parameter(_uniform(rng, (dim, node_in), node_in)),
        node_bias=ad.parameter(_uniform(rng, (dim,), node_in)),
        node_gain=ad.parameter(np.ones(dim)),
        node_shift=ad.parameter(np.zeros(dim)),
    )


def init_propagation_layer(dim, rng, message_dim=None):
    message_dim = message_dim or dim
    return PropagationLayerParams(
        _init_branch(dim, message_dim, rng), _init_branch(dim, message_dim, rng)
    )


def init_layers(variant, n_layers, dim, rng, temperature=10.0, cross_weight=1.0, message_dim=None):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown layer variant {variant!r}; choose from {VARIANTS}")
    if variant == "attention":
        return [init_attention_layer(dim, rng, temperature, cross_weight) for _ in range(n_layers)]
    return [init_propagation_layer(dim, rng, message_dim) for _ in range(n_layers)]


def neighbor_mask(adj):
    data = adj.data if isinstance(adj, Tensor) else np.asarray(adj)
    mask = data != 0
    if not mask.any(axis=1).all():
        empty = np.flatnonzero(~mask.any(axis=1)).tolist()
        raise DegenerateRowError(f"nodes {empty} have no neighbours")
    return mask


def _check_nodes(h_v, h_s):
    if h_v.shape != h_s.shape or h_v.ndim != 2:
        raise ContractError(f"visual nodes {h_v.shape} and semantic nodes {h_s.shape} must match")


def _attend(h, adj, projection, temperature):
    unit = ad.l2_normalize_rows(h @ projection.T)
    alpha = ad.row_softmax((unit @ unit.T) * temperature, mask=neighbor_mask(adj))
    return alpha @ h


def attention_layer(h_v, h_s, adj_visual, adj_semantic, params, cross=True):
    h_v, h_s = ad.as_tensor(h_v), ad.as_tensor(h_s)
    _check_nodes(h_v, h_s)
    out_v = _attend(h_v, adj_visual, params.projection, params.temperature)
    out_s = _attend(h_s, adj_semantic, params.projection, params.temperature)
    if cross and params.cross_weight != 0:
        out_v = out_v + params.cross_weight * (h_v - h_s)
        out_s = out_s + params.cross_weight * (h_s - h_v)
    return out_v, out_s


def _propagate(h, h_other, adj, br, cross):
    n, k = h.shape
    d = br.msg_weight.shape[0]
    w = br.msg_weight
    to_i = h @ w[:, :k].T
    from_j = h @ w[:, k:2 * k].T
    edge = ad.as_tensor(adj).reshape(n, n, 1) * w[:, 2 * k].reshape(1, 1, d)
    pre = to_i.reshape(n, 1, d) + from_j.reshape(1, n, d) + edge + br.msg_bias
    messages = ad.layer_norm_rows(ad.relu(pre), br.msg_gain, br.msg_shift)
    keep = neighbor_mask(adj).astype(np.float64).reshape(n, n, 1)
    inbox = (messages * keep).sum(axis=1)
    diff = h - h_other if cross else Tensor(np.zeros(h.shape))
    update = ad.concat([h, inbox, diff], axis=1) @ br.node_weight.T + br.node_bias
    return ad.layer_norm_rows(ad.relu(update), br.node_gain, br.node_shift)


def propagation_layer(h_v, h_s, adj_visual, adj_semantic, params, cross=True):
    h_v, h_s = ad.as_tensor(h_v), ad.as_tensor(h_s)
    _check_nodes(h_v, h_s)
    out_v = _propagate(h_v, h_s, adj_visual, params.visual, cross)
    out_s = _propagate(h_s, h_v, adj_semantic, params.semantic, cross)
    return out_v, out_s


def relation_distribution(h):
    unit = ad.l2_normalize_rows(h)
    return ad.row_softmax(unit @ unit.T)


def relation_distributions(h_v, h_s):
    return relation_distribution(h_v), relation_distribution(h_s)


@dataclass
class GmnState:
    visual_nodes: list
    semantic_nodes: list
    visual_distributions: list
    semantic_distributions: list

    @property
    def n_layers(self):
        return len(self.visual_distributions)


def apply_layer(h_v, h_s, adj_visual, adj_semantic, params, cross=True):
    if params.variant == "attention":
        return attention_layer(h_v, h_s, adj_visual, adj_semantic, params, cross)
    return propagation_layer(h_v, h_s, adj_visual, adj_semantic, params, cross)


def run_gmn(graphs, layers, mask=True, cross=True):
    """Apply the layer stack, recording nodes and relation distributions per layer."""
    if not layers:
        raise ConfigError("run_gmn needs at least one layer")
    adj_v = graphs.adjacency_masked if mask else graphs.adjacency_visual
    adj_s = graphs.adjacency_semantic
    h_v, h_s = graphs.visual_nodes, graphs.semantic_nodes
    state = GmnState([h_v], [h_s], [], [])
    for params in layers:
        h_v, h_s = apply_layer(h_v, h_s, adj_v, adj_s, params, cross)
        p_v, p_s = relation_distributions(h_v, h_s)
        state.visual_nodes.append(h_v)
        state.semantic_nodes.append(h_s)
        state.visual_distributions.append(p_v)
        state.semantic_distributions.append(p_s)
    return state


def direct_relations(graphs):
    """Relation distributions of the unprocessed graphs (relation loss without GMN)."""
    p_v, p_s = relation_distributions(graphs.visual_nodes, graphs.semantic_nodes)
    return GmnState([graphs.visual_nodes], [graphs.semantic_nodes], [p_v], [p_s])
