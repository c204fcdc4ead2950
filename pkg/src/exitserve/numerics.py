"""Dense float64 kernels shared by the model, exit policies and KV cache.

Random weights come from numpy's Philox4x64 counter-based generator
(``numpy.random.Philox``), which produces the same stream for the same key on
every platform numpy supports.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

DTYPE = np.float64


def as_vector(x: Sequence[float] | np.ndarray) -> np.ndarray:
    v = np.asarray(x, dtype=DTYPE)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def as_matrix(x: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``w @ x`` after checking that the inner dimensions agree."""
    w = as_matrix(w)
    x = as_vector(x)
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {w.shape} x vector ({x.shape[0]},)")
    return w @ x


def softmax(v: np.ndarray) -> np.ndarray:
    v = as_vector(v)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    z = np.exp(v - v.max())
    return z / z.sum()


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    c = float(np.dot(u, v)) / (nu * nv)
    # rounding can push |c| a hair past 1
    return min(1.0, max(-1.0, c))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def seeded_tensor(shape: int | tuple[int, ...], seed: int) -> np.ndarray:
    """Uniform(-s, s) tensor with ``s = 1/sqrt(fan_in)``.

    ``fan_in`` is the last dimension (the input width of a row-major weight
    matrix, or the length of a vector). Values are drawn from
    ``Philox(key=seed)`` so identical ``(shape, seed)`` pairs give bitwise
    identical tensors.
    """
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ValueError(f"all dimensions must be positive, got {shape}")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    scale = 1.0 / math.sqrt(shape[-1])
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE, copy=False)
