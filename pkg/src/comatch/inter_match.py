"""Unsupervised co-occurrence matching across a group of feature maps.

The features of ``N`` images are stacked into one ``c x n_total`` matrix of
unit columns. A two-way fg/bg split that pulls similar columns together is
found by relaxing the signed cluster indicator to the unit sphere and taking
the leading eigenvector of ``X^T X - 1 1^T`` on the sum-to-zero subspace.
The signed indicator, reshaped per image, gates an ``alpha`` boost of the
matched feature cells.

Feature maps are ``rows x cols x c`` arrays; column ``i`` of a pack is the
spatial cell ``(i // cols, i % cols)`` of image ``i // (rows * cols)``.
"""

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericAbort, ParameterError
from .tensor_core import l2_normalize_cols, rng_stream

BRUTE_FORCE_MAX = 16


@dataclass
class InterMatchConfig:
    alpha: float = 1.5
    group_n: int = 2
    power_iters_max: int = 500
    tol: float = 1e-8

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise ParameterError(f"alpha must be > 1, got {self.alpha}")
        if self.group_n < 2:
            raise ParameterError(f"group_n must be >= 2, got {self.group_n}")


@dataclass
class FeaturePack:
    x: np.ndarray  # c x n_total, unit columns
    group_n: int
    rows: int
    cols: int
    c: int
    raw_norms: np.ndarray  # column norms before normalization

    @property
    def n_total(self):
        return self.x.shape[1]


@dataclass
class ClusterIndicator:
    m: np.ndarray
    mode: str  # "discrete" or "relaxed"
    converged: bool = True
    degenerate: bool = False
    iterations: int = 0
    rayleigh_trace: list = field(default_factory=list)

    @property
    def rayleigh(self):
        return self.rayleigh_trace[-1] if self.rayleigh_trace else float("nan")


def pack_features(maps):
    maps = [np.asarray(f, dtype=np.float64) for f in maps]
    if len(maps) < 2:
        raise DimensionError("a pack needs at least two feature maps")
    shape = maps[0].shape
    if len(shape) != 3:
        raise DimensionError(f"feature maps must be rows x cols x c, got {shape}")
    for f in maps[1:]:
        if f.shape != shape:
            raise DimensionError(f"feature map shapes differ: {shape} vs {f.shape}")
    rows, cols, c = shape
    raw = np.concatenate([f.reshape(rows * cols, c) for f in maps], axis=0).T
    if not np.all(np.isfinite(raw)):
        raise NumericAbort("non-finite feature values entering inter-matching")
    raw_norms = np.sqrt(np.sum(raw * raw, axis=0))
    return FeaturePack(l2_normalize_cols(raw), len(maps), rows, cols, c, raw_norms)


def unpack_features(pack):
    """Inverse of :func:`pack_features` on the normalized columns."""
    per = pack.rows * pack.cols
    return [
        pack.x[:, g * per:(g + 1) * per].T.reshape(pack.rows, pack.cols, pack.c)
        for g in range(pack.group_n)
    ]


def _x(pack_or_x):
    return pack_or_x.x if isinstance(pack_or_x, FeaturePack) else np.asarray(pack_or_x, dtype=np.float64)


def squared_distances(x):
    """``D_ij = ||x_i - x_j||^2`` by explicit differences, no Gram shortcut."""
    x = _x(x)
    diff = x[:, :, None] - x[:, None, :]
    return np.sum(diff * diff, axis=0)


def sum_objective(assign, x):
    """Four-block cluster objective for a boolean fg (True) / bg (False) split."""
    x = _x(x)
    assign = np.asarray(assign, dtype=bool)
    if assign.shape != (x.shape[1],):
        raise DimensionError(f"assignment length {assign.shape} != {x.shape[1]} columns")
    d = squared_distances(x)
    fg, bg = assign, ~assign
    return float(
        d[np.ix_(fg, fg)].sum()
        + d[np.ix_(bg, bg)].sum()
        - d[np.ix_(fg, bg)].sum()
        - d[np.ix_(bg, fg)].sum()
    )


def indicator_from_assign(assign):
    assign = np.asarray(assign, dtype=bool)
    n = assign.size
    m = np.where(assign, 1.0, -1.0) / np.sqrt(n)
    return ClusterIndicator(m, "discrete")


def assign_from_indicator(ind):
    m = ind.m if isinstance(ind, ClusterIndicator) else np.asarray(ind)
    return m > 0


def matrix_objective(ind, x):
    """``n_total * m^T D m`` for a discrete indicator; equals :func:`sum_objective`."""
    if not isinstance(ind, ClusterIndicator) or ind.mode != "discrete":
        raise ContractError("matrix_objective needs a discrete ClusterIndicator")
    x = _x(x)
    m = ind.m
    if m.shape != (x.shape[1],):
        raise DimensionError(f"indicator length {m.shape} != {x.shape[1]} columns")
    d = squared_distances(x)
    return float(m.size * (m @ d @ m))


def build_affinity(x):
    """``X^T X - 1 1^T``; symmetric, zero diagonal, entries in [-2, 0]."""
    x = _x(x)
    d_hat = x.T @ x - 1.0
    # exact symmetry and zero diagonal regardless of BLAS rounding
    d_hat = 0.5 * (d_hat + d_hat.T)
    np.fill_diagonal(d_hat, 0.0)
    return d_hat


def _center(v):
    return v - v.mean()


def _is_degenerate(d_hat, atol=1e-12):
    # projected operator P d P equal to a multiple of P on the sum-zero subspace
    n = d_hat.shape[0]
    pdp = d_hat - d_hat.mean(axis=0, keepdims=True) - d_hat.mean(axis=1, keepdims=True) + d_hat.mean()
    lam = np.trace(pdp) / (n - 1)
    p = np.eye(n) - 1.0 / n
    return bool(np.max(np.abs(pdp - lam * p)) <= atol * max(1.0, abs(lam)))


def solve_indicator(d_hat, cfg=None, init=None):
    """Leading eigenvector of ``d_hat`` restricted to ``{m : sum(m) = 0, |m| = 1}``.

    Shifted power iteration: each step multiplies by ``d_hat + n I``
    (positive on the subspace because ``|d_hat_ij| <= 2``), projects back onto
    the sum-zero subspace and renormalizes. Stops once successive Rayleigh
    quotients move by less than ``cfg.tol``.

    ``init`` seeds the iteration; by default a fixed seeded draw is used. A
    start vector that is equivariant under column permutations (such as the
    centered activation norms) makes the result equivariant as well.
    """
    cfg = cfg or InterMatchConfig()
    d_hat = np.asarray(d_hat, dtype=np.float64)
    if d_hat.ndim != 2 or d_hat.shape[0] != d_hat.shape[1]:
        raise DimensionError(f"affinity must be square, got {d_hat.shape}")
    n = d_hat.shape[0]
    if n < 2:
        raise DimensionError("need at least two columns")
    if not np.allclose(d_hat, d_hat.T, rtol=0.0, atol=1e-9):
        raise ContractError("affinity matrix is not symmetric")

    shift = float(n)
    v = None
    if init is not None:
        v = _center(np.asarray(init, dtype=np.float64))
        if not np.linalg.norm(v) > 1e-12:
            v = None
    if v is None:
        v = _center(rng_stream(0, n).standard_normal(n))
    v /= np.linalg.norm(v)

    degenerate = _is_degenerate(d_hat)
    rq = float(v @ d_hat @ v)
    trace = [rq]
    converged = degenerate
    it = 0
    if not degenerate:
        for it in range(1, cfg.power_iters_max + 1):
            y = d_hat @ v + shift * v
            y = _center(y)
            norm = np.linalg.norm(y)
            if norm == 0.0:
                break
            v = y / norm
            rq_new = float(v @ d_hat @ v)
            trace.append(rq_new)
            done = abs(rq_new - rq) < cfg.tol
            rq = rq_new
            if done:
                converged = True
                break
    # one final projection keeps the constraints tight to rounding
    v = _center(v)
    v /= np.linalg.norm(v)
    return ClusterIndicator(v, "relaxed", converged=converged, degenerate=degenerate,
                            iterations=it, rayleigh_trace=trace)


def orient(ind, raw_norms):
    """Flip the sign so the positive side carries the larger mean activation norm."""
    m = ind.m
    raw_norms = np.asarray(raw_norms, dtype=np.float64)
    pos, neg = m > 0, m < 0
    mean_pos = raw_norms[pos].mean() if pos.any() else 0.0
    mean_neg = raw_norms[neg].mean() if neg.any() else 0.0
    if mean_pos >= mean_neg:
        return ind
    return ClusterIndicator(-m, ind.mode, ind.converged, ind.degenerate,
                            ind.iterations, list(ind.rayleigh_trace))


def split_masks(ind, rows, cols, group_n):
    m = ind.m if isinstance(ind, ClusterIndicator) else np.asarray(ind, dtype=np.float64)
    per = rows * cols
    if m.shape != (group_n * per,):
        raise DimensionError(f"indicator length {m.shape[0]} != {group_n}*{rows}*{cols}")
    return [m[g * per:(g + 1) * per].reshape(rows, cols).copy() for g in range(group_n)]


def reweight_scale(mask, alpha):
    """Per-cell multiplier: ``alpha`` where ``mask > 0``, else 1 (zero counts as bg)."""
    if not alpha > 1.0:
        raise ParameterError(f"alpha must be > 1, got {alpha}")
    return np.where(np.asarray(mask) > 0, float(alpha), 1.0)


def reweight(f, mask, alpha):
    f = np.asarray(f, dtype=np.float64)
    mask = np.asarray(mask)
    if f.shape[:2] != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match feature map {f.shape}")
    return f * reweight_scale(mask, alpha)[:, :, None]


def co_masks(maps, cfg=None):
    """pack -> affinity -> solve -> orient -> split for one group of maps."""
    cfg = cfg or InterMatchConfig()
    pack = pack_features(maps)
    d_hat = build_affinity(pack)
    ind = solve_indicator(d_hat, cfg, init=pack.raw_norms)
    ind = orient(ind, pack.raw_norms)
    return split_masks(ind, pack.rows, pack.cols, pack.group_n), ind


def brute_force(x):
    """Exhaustive minimizer of :func:`sum_objective` over all fg/bg splits.

    Returns ``(assign, objective)``. Among (numerically) tied minima the
    lexicographically smallest assignment wins, ordering bg before fg and
    comparing column 0 first.
    """
    x = _x(x)
    n = x.shape[1]
    if n > BRUTE_FORCE_MAX:
        raise ParameterError(f"brute force refused for n_total={n} > {BRUTE_FORCE_MAX}")
    values, bits = all_assignment_objectives(x)
    best = values.min()
    scale = max(1.0, float(np.abs(values).max()))
    first = int(np.flatnonzero(values <= best + 1e-12 * scale)[0])
    return bits[first].astype(bool), float(values[first])


def all_assignment_objectives(x):
    """Objective value of every split, in lexicographic order of assignments."""
    x = _x(x)
    n = x.shape[1]
    bits = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8)
    s = 2.0 * bits - 1.0
    d = squared_distances(x)
    return np.einsum("ai,ij,aj->a", s, d, s), bits


def time_group_match(rows, cols, c, group_n, trials, seed=0, cfg=None):
    """Median wall time of pack -> affinity -> solve on random maps."""
    if not 2 <= group_n <= 5:
        raise ParameterError(f"group_n must lie in [2, 5], got {group_n}")
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    cfg = cfg or InterMatchConfig(group_n=group_n)
    rng = rng_stream(seed, 1000 + group_n)
    times = []
    for _ in range(trials):
        maps = [np.maximum(rng.standard_normal((rows, cols, c)), 0.0) for _ in range(group_n)]
        t0 = time.perf_counter()
        pack = pack_features(maps)
        solve_indicator(build_affinity(pack), cfg, init=pack.raw_norms)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
