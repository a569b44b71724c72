"""Dynamic graph attention over two keypoint sets.

Each layer runs one multi-head self-attention block within each cloud
followed by one cross-attention block between them, with residual
message MLPs and all weights shared across the two clouds.  Deeper
layers can prune each node's incoming edges to the top-k ranked by the
previous layer's head-averaged attention; the selection itself carries
no gradient.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .features import _glorot, _init_mlp, _mlp
from .tensor import Tensor

FULL = None  # edge budget meaning "fully connected"

DEFAULT_SELF_SCHEDULE = (FULL, FULL, FULL, FULL, FULL, 128, 128, 64, 64)
DEFAULT_CROSS_SCHEDULE = (256,) * 9


def decay_schedules(variant, num_layers=9):
    """Named edge-budget schedules: 'default', 'variant1', 'variant2'."""
    if num_layers != 9:
        raise ValueError("named schedules are defined for 9 layers")
    if variant == "default":
        return list(DEFAULT_SELF_SCHEDULE), list(DEFAULT_CROSS_SCHEDULE)
    if variant == "variant1":
        return [128] * 7 + [64] * 2, list(DEFAULT_CROSS_SCHEDULE)
    if variant == "variant2":
        decay = [FULL] * 5 + [128, 128, 64, 64]
        return list(decay), list(decay)
    raise ValueError("unknown schedule variant %r" % variant)


@dataclass(frozen=True)
class GatConfig:
    num_layers: int = 9
    num_heads: int = 4
    feature_dim: int = 128
    self_schedule: tuple = DEFAULT_SELF_SCHEDULE
    cross_schedule: tuple = DEFAULT_CROSS_SCHEDULE

    def __post_init__(self):
        if self.feature_dim % self.num_heads != 0:
            raise ValueError("feature_dim must be divisible by num_heads")
        if len(self.self_schedule) != self.num_layers:
            raise ValueError("self_schedule length must equal num_layers")
        if len(self.cross_schedule) != self.num_layers:
            raise ValueError("cross_schedule length must equal num_layers")
        for k in list(self.self_schedule) + list(self.cross_schedule):
            if k is not None and k < 1:
                raise ValueError("edge budgets must be >= 1 (or None for full)")

    @property
    def head_dim(self):
        return self.feature_dim // self.num_heads


@dataclass
class EdgeSet:
    """Per query node, the retained source-node indices for one layer."""

    neighbors: list
    n_source: int

    def as_mask(self):
        mask = np.zeros((len(self.neighbors), self.n_source), dtype=bool)
        for i, idx in enumerate(self.neighbors):
            mask[i, idx] = True
        return mask


def full_edges(m, n):
    return EdgeSet([np.arange(n)] * m, n)


def update_edges(alpha_prev, k):
    """Top-k edges per query node by head-averaged previous attention.

    ``k = None`` keeps the graph fully connected; budgets clamp to the
    number of available nodes; ties break toward the lower index.  The
    ranking reads plain arrays, so no gradient flows through selection.
    """
    alpha_prev = np.asarray(alpha_prev)
    m, n = alpha_prev.shape
    if k is None or k >= n:
        return full_edges(m, n)
    cols = np.arange(n)
    neighbors = []
    for i in range(m):
        order = np.lexsort((cols, -alpha_prev[i]))
        neighbors.append(np.sort(order[:k]))
    return EdgeSet(neighbors, n)


def init_gat(store, cfg, rng, prefix="gat"):
    fd = cfg.feature_dim
    for layer in range(cfg.num_layers):
        for kind in ("self", "cross"):
            base = "%s.layer%d.%s" % (prefix, layer, kind)
            for proj in ("q", "k", "v"):
                store.add(base + ".%s.W" % proj, _glorot(rng, fd, fd))
                store.add(base + ".%s.b" % proj, np.zeros((1, fd)))
            # residual branches start small so deep stacks stay near
            # unit scale at init instead of compounding per block
            _init_mlp(store, base + ".m", [2 * fd, 2 * fd, fd], rng,
                      out_scale=0.25)
    store.add(prefix + ".final.W", _glorot(rng, fd, fd))
    store.add(prefix + ".final.b", np.zeros((1, fd)))


def _linear(x, store, name):
    return T.add(T.matmul(x, store[name + ".W"]), store[name + ".b"])


def project_qkv(x_query, x_source, store, base):
    """Q from the receiving cloud, K and V from the attended cloud."""
    q = _linear(x_query, store, base + ".q")
    k = _linear(x_source, store, base + ".k")
    v = _linear(x_source, store, base + ".v")
    return q, k, v


def attention_weights(q, k, edges, num_heads):
    """Per-head softmax attention restricted to the edge set.

    Off-edge entries are exactly zero.  A node with no edges gets an
    all-zero row (it will receive a zero message) rather than a softmax
    over nothing.
    """
    fd = q.shape[1]
    dh = fd // num_heads
    scale = 1.0 / math.sqrt(dh)
    mask = edges.as_mask()
    empty = ~mask.any(axis=1)
    soft_mask = mask
    if empty.any():
        soft_mask = mask.copy()
        soft_mask[empty] = True
    keep_rows = Tensor((~empty).astype(np.float64).reshape(-1, 1))
    alphas = []
    for h in range(num_heads):
        qh = T.narrow(q, 1, h * dh, dh)
        kh = T.narrow(k, 1, h * dh, dh)
        logits = T.mul(T.matmul(qh, T.transpose(kh)), scale)
        a = T.softmax_rows(logits, mask=soft_mask)
        if empty.any():
            a = T.mul(a, keep_rows)
        alphas.append(a)
    return alphas


def propagate(x, alphas, v, store, base):
    """Residual update: x + MLP(concat(x, per-head attention messages))."""
    num_heads = len(alphas)
    dh = v.shape[1] // num_heads
    messages = [T.matmul(a, T.narrow(v, 1, h * dh, dh))
                for h, a in enumerate(alphas)]
    m = T.concat(messages, axis=1)
    return T.add(x, _mlp(T.concat([x, m], axis=1), store, base + ".m", 2))


def _head_average_logits(q, k, num_heads):
    """Ranking basis when a layer prunes before any attention exists."""
    fd = q.shape[1]
    dh = fd // num_heads
    scale = 1.0 / math.sqrt(dh)
    total = np.zeros((q.shape[0], k.shape[0]))
    for h in range(num_heads):
        qh = q.data[:, h * dh:(h + 1) * dh]
        kh = k.data[:, h * dh:(h + 1) * dh]
        total += (qh @ kh.T) * scale
    return total / num_heads


def _attention_block(x_a, x_b, store, base, cfg, k_limit, prev_alpha):
    q, k, v = project_qkv(x_a, x_b, store, base)
    n = x_b.shape[0]
    if k_limit is None or k_limit >= n:
        edges = full_edges(x_a.shape[0], n)
    elif prev_alpha is not None:
        edges = update_edges(prev_alpha, k_limit)
    else:
        edges = update_edges(_head_average_logits(q, k, cfg.num_heads), k_limit)
    alphas = attention_weights(q, k, edges, cfg.num_heads)
    x_new = propagate(x_a, alphas, v, store, base)
    alpha_mean = np.mean([a.data for a in alphas], axis=0)
    return x_new, alpha_mean, edges


def gat_forward(desc_q, desc_s, cfg, store, prefix="gat", trace=None):
    """Alternating self/cross attention stack, then the shared output projection.

    Both clouds use the same weights; within a block the two sides update
    simultaneously from the pre-block states, so swapping the argument
    order swaps the outputs exactly.
    """
    if desc_q.shape[0] < 1 or desc_s.shape[0] < 1:
        raise ValueError("attention needs at least one keypoint per cloud")
    x_q, x_s = desc_q, desc_s
    prev = {"self.q": None, "self.s": None, "cross.q": None, "cross.s": None}
    for layer in range(cfg.num_layers):
        base = "%s.layer%d.self" % (prefix, layer)
        k_lim = cfg.self_schedule[layer]
        new_q, a_q, e_q = _attention_block(x_q, x_q, store, base, cfg, k_lim, prev["self.q"])
        new_s, a_s, e_s = _attention_block(x_s, x_s, store, base, cfg, k_lim, prev["self.s"])
        x_q, x_s = new_q, new_s
        prev["self.q"], prev["self.s"] = a_q, a_s
        if trace is not None:
            trace.append({"layer": layer, "kind": "self", "edges": (e_q, e_s)})

        base = "%s.layer%d.cross" % (prefix, layer)
        k_lim = cfg.cross_schedule[layer]
        new_q, a_q, e_q = _attention_block(x_q, x_s, store, base, cfg, k_lim, prev["cross.q"])
        new_s, a_s, e_s = _attention_block(x_s, x_q, store, base, cfg, k_lim, prev["cross.s"])
        x_q, x_s = new_q, new_s
        prev["cross.q"], prev["cross.s"] = a_q, a_s
        if trace is not None:
            trace.append({"layer": layer, "kind": "cross", "edges": (e_q, e_s)})

    f_q = _linear(x_q, store, prefix + ".final")
    f_s = _linear(x_s, store, prefix + ".final")
    return f_q, f_s
