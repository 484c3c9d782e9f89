"""Dense numerics shared by the model, the OT solvers and the harness.

Tensors are plain ``numpy.ndarray`` objects. Model data is float32; products
and reductions accumulate in float64 and are cast back to the input dtype, so
a float64 model (used for gradient checks) stays float64 end to end.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

Tensor = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _result_dtype(*arrays: np.ndarray) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float32)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with float64 accumulation.

    Leading batch axes broadcast as in ``numpy.matmul``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return out.astype(_result_dtype(a, b), copy=False)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    a = np.asarray(a)
    x = a.astype(np.float64, copy=False)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    z /= z.sum(axis=-1, keepdims=True)
    return z.astype(_result_dtype(a), copy=False)


def layer_norm(x: Tensor, alpha: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    x = np.asarray(x)
    if x.shape[-1] != np.shape(alpha)[-1] or x.shape[-1] != np.shape(beta)[-1]:
        raise ShapeError(
            f"layer_norm: last axis {x.shape[-1]} vs alpha {np.shape(alpha)} beta {np.shape(beta)}"
        )
    x64 = x.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    # eps == 0 on a constant vector would divide 0 by 0; the centred values
    # are exactly zero there, so the normalised output is zero too
    denom = np.sqrt(var + eps)
    xhat = np.divide(xc, denom, out=np.zeros_like(xc), where=denom > 0)
    out = xhat * np.asarray(alpha, dtype=np.float64) + np.asarray(beta, dtype=np.float64)
    return out.astype(_result_dtype(x), copy=False)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via ``erf``."""
    x = np.asarray(x)
    x64 = x.astype(np.float64, copy=False)
    out = 0.5 * x64 * (1.0 + erf(x64 * _INV_SQRT2))
    return out.astype(_result_dtype(x), copy=False)


def gelu_grad(x: Tensor) -> Tensor:
    """Derivative of :func:`gelu`: ``Phi(x) + x * phi(x)``."""
    x = np.asarray(x)
    x64 = x.astype(np.float64, copy=False)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    pdf = np.exp(-0.5 * x64 * x64) / math.sqrt(2.0 * math.pi)
    return (cdf + x64 * pdf).astype(_result_dtype(x), copy=False)


def pairwise_sq_dist(x: Tensor, y: Tensor) -> Tensor:
    """Squared Euclidean distances between rows of ``x`` (n x d) and ``y`` (m x d).

    Computed by direct differencing (not the ``|x|^2 + |y|^2 - 2xy`` expansion),
    so identical rows give exactly zero and no entry can go negative.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: feature mismatch {x.shape} vs {y.shape}")
    out = np.empty((x.shape[0], y.shape[0]), dtype=np.float64)
    # row blocks bound the n x m x d temporary
    block = max(1, 2_000_000 // max(1, y.shape[0] * max(1, x.shape[1])))
    for start in range(0, x.shape[0], block):
        diff = x[start : start + block, None, :] - y[None, :, :]
        out[start : start + block] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


class Rng:
    """Seeded counter-based random source.

    Backed by the Philox-4x64 bit generator keyed by ``(seed, stream)``; the
    raw 64-bit outputs are turned into uniforms on [0, 1) with 53-bit
    precision and into normals with the Box-Muller transform, so streams do
    not depend on numpy's distribution samplers (whose algorithms may change
    between releases).
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed < 2**64 or not 0 <= stream < 2**64:
            raise ValueError("seed and stream must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream = int(stream)
        self._bits = np.random.Philox(key=self.seed + (self.stream << 64))

    def spawn(self, stream: int) -> Rng:
        """Independent stream sharing this seed."""
        return Rng(self.seed, stream)

    def uniform(self, size: int) -> np.ndarray:
        raw = self._bits.random_raw(size)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, size: int) -> np.ndarray:
        """``size`` float64 standard normals (Box-Muller, both outputs used)."""
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:size]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return low + np.floor(self.uniform(size) * (high - low)).astype(np.int64)


def rand_normal(rng: Rng, shape, dtype=np.float32) -> Tensor:
    shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    return rng.normal(n).reshape(shape).astype(dtype)


def trunc_normal(rng: Rng, shape, std: float, bound: float = 2.0, dtype=np.float32) -> Tensor:
    """Normal samples with |z| > ``bound`` redrawn, scaled by ``std``."""
    shape = tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    z = rng.normal(n)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return (z * std).reshape(shape).astype(dtype)
