"""Within-image feature propagation over top-k feature-space neighbours.

Every point of a ``c x n`` feature matrix is matched to the ``k`` other
points with the largest inner product, and replaced by the elementwise max
of a shared two-layer MLP applied to those neighbours.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor_core import NEG_INF, l2_normalize_cols, top_k_rows

METRICS = ("inner", "cosine", "l2")


@dataclass
class IntraMatchConfig:
    k: int = 8
    metric: str = "inner"


@dataclass
class PointUpdateParams:
    w1: np.ndarray  # c x c
    b1: np.ndarray  # c
    w2: np.ndarray  # c x c
    b2: np.ndarray  # c

    @classmethod
    def init(cls, c, rng):
        s = 1.0 / np.sqrt(c)
        return cls(
            rng.uniform(-s, s, (c, c)), rng.uniform(-s, s, c),
            rng.uniform(-s, s, (c, c)), rng.uniform(-s, s, c),
        )


def similarity(f):
    """``G = F^T F`` with the diagonal set to ``-inf``."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError(f"similarity expects a c x n matrix, got {f.shape}")
    g = f.T @ f
    g = 0.5 * (g + g.T)
    np.fill_diagonal(g, NEG_INF)
    return g


def neg_sq_distance(f):
    """``-|f_i - f_j|^2`` with the diagonal set to ``-inf`` (nearest = largest)."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError(f"expected a c x n matrix, got {f.shape}")
    sq = np.sum(f * f, axis=0)
    g = 2.0 * (f.T @ f) - sq[:, None] - sq[None, :]
    g = 0.5 * (g + g.T)
    np.fill_diagonal(g, NEG_INF)
    return g


def top_k_match(g, k):
    return top_k_rows(g, k)


def match_points(f, k, metric="inner"):
    """Top-k table for a ``c x n`` matrix.

    ``"inner"`` ranks by the raw inner product ``f_i . f_j``; ``"l2"`` by
    ascending Euclidean distance; ``"cosine"`` by the inner product of
    unit-normalized columns (equivalently, Euclidean distance between the
    normalized features).
    """
    if metric == "inner":
        return top_k_match(similarity(f), k)
    if metric == "cosine":
        return top_k_match(similarity(l2_normalize_cols(f)), k)
    if metric == "l2":
        return top_k_match(neg_sq_distance(f), k)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def gather(f, idx):
    """``out[:, i, j] = f[:, idx[i, j]]``."""
    f = np.asarray(f)
    idx = np.asarray(idx)
    n = f.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"match index out of range [0, {n})")
    return f[:, idx]


def mlp(p, params):
    """Two-layer perceptron on the leading (channel) axis; returns output and hidden cache."""
    c = p.shape[0]
    flat = p.reshape(c, -1)
    z1 = params.w1 @ flat + params.b1[:, None]
    a1 = np.maximum(z1, 0.0)
    out = params.w2 @ a1 + params.b2[:, None]
    return out.reshape(p.shape), (flat, z1, a1)


def update_points(neigh, params):
    """Max over the K neighbour slots of the MLP output; ``c x n x K -> c x n``."""
    neigh = np.asarray(neigh, dtype=np.float64)
    if neigh.ndim != 3:
        raise DimensionError(f"expected c x n x K neighbours, got {neigh.shape}")
    h, _ = mlp(neigh, params)
    return h.max(axis=2)


@dataclass
class IntraCache:
    f: np.ndarray       # c x n input points
    idx: np.ndarray     # n x K
    hidden: tuple       # mlp cache over the n points
    win: np.ndarray     # c x n winning neighbour (point index) per output entry


def intra_forward(f, params, k=None, idx=None, metric="inner"):
    """Full intra-matching on a ``c x n`` matrix.

    The MLP is evaluated once per point and its outputs gathered, which is
    equivalent to ``update_points(gather(f, idx), params)``. Pass ``idx`` to
    reuse a previous matching instead of recomputing top-k.
    """
    f = np.asarray(f, dtype=np.float64)
    if idx is None:
        idx = match_points(f, k, metric)
    h, hidden = mlp(f, params)
    hg = h[:, idx]                           # c x n x K
    slot = hg.argmax(axis=2)                 # first max = lowest slot
    win = np.take_along_axis(np.broadcast_to(idx, hg.shape), slot[:, :, None], axis=2)[:, :, 0]
    out = np.take_along_axis(hg, slot[:, :, None], axis=2)[:, :, 0]
    return out, IntraCache(f, idx, hidden, win)


def backward_update(grad_out, cache, params):
    """Reverse pass of :func:`intra_forward`.

    Returns ``(grad_f, grads)`` with ``grads`` keyed ``w1, b1, w2, b2``. The
    match indices are constants; each output entry routes its gradient to
    the single winning neighbour.
    """
    if cache is None:
        raise ContractError("backward_update needs the forward cache")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    c, n = cache.f.shape
    gh = np.zeros((c, n))
    rows = np.broadcast_to(np.arange(c)[:, None], cache.win.shape)
    np.add.at(gh, (rows, cache.win), grad_out)
    flat, z1, a1 = cache.hidden
    gw2 = gh @ a1.T
    gb2 = gh.sum(axis=1)
    ga1 = params.w2.T @ gh
    gz1 = ga1 * (z1 > 0)
    gw1 = gz1 @ flat.T
    gb1 = gz1.sum(axis=1)
    gf = params.w1.T @ gz1
    return gf, {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}
