"""Dense float64 array helpers and seeded random streams.

Arrays are plain ``numpy.ndarray`` objects in float64. The helpers here add
the shape checks and the degenerate-case rules the rest of the package
relies on (zero columns, ``-inf`` sentinels, tie-breaking).
"""

import numpy as np

from .errors import DimensionError, ParameterError

NEG_INF = -np.inf


def as_tensor(x):
    return np.asarray(x, dtype=np.float64)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def l2_normalize_cols(x):
    """Scale every column of a ``c x n`` matrix to unit Euclidean norm.

    All-zero columns become the first basis vector ``e_1`` instead of NaN.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a c x n matrix, got shape {x.shape}")
    norms = np.sqrt(np.sum(x * x, axis=0))
    zero = norms == 0.0
    out = x / np.where(zero, 1.0, norms)
    if np.any(zero):
        out[:, zero] = 0.0
        out[0, zero] = 1.0
    return out


def top_k_rows(g, k):
    """Indices of the ``k`` largest entries of each row.

    Rows are sorted by descending value; equal values keep the smaller
    column index first. ``-inf`` entries sort last, so they are only picked
    when a row has fewer than ``k`` finite entries.
    """
    g = as_tensor(g)
    if g.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {g.shape}")
    n = g.shape[1]
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ParameterError(f"k must be a positive integer, got {k!r}")
    if k >= n:
        raise ParameterError(f"k={k} must be smaller than the row length {n}")
    order = np.argsort(-g, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


def transpose(x, axes=None):
    return np.transpose(as_tensor(x), axes)


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    return x.reshape(shape)


def gap(x):
    """Global average pooling of a ``rows x cols x c`` map to a length-``c`` vector."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"gap expects rows x cols x c, got {x.shape}")
    return x.mean(axis=(0, 1))


def rng_stream(seed, stream_id=0):
    """Independent PCG64 generator for ``(seed, stream_id)``.

    The same pair always yields the same draws; different ids give
    statistically independent streams.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))
