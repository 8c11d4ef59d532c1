"""Kernel evaluations, finite-difference checks and seeded random streams."""

from __future__ import annotations

import enum
import hashlib

import numpy as np


class KernelConvention(str, enum.Enum):
    """How a bandwidth parameter enters the Gaussian kernel.

    ``INVERSE_BANDWIDTH`` is ``exp(-d2 / gamma)``; ``MULTIPLIER`` is
    ``exp(-gamma * d2)``, the form used by most SVM packages.
    """

    INVERSE_BANDWIDTH = "inverse_bandwidth"
    MULTIPLIER = "multiplier"


DEFAULT_CONVENTION = KernelConvention.MULTIPLIER


def _vec(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    return a


def squared_euclidean(a, b) -> float:
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


def pairwise_sq_dists(A, B):
    """Squared distances between the rows of ``A`` (n, d) and ``B`` (m, d).

    Uses the expanded form and clips tiny negatives produced by cancellation.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    d2 = A @ B.T
    d2 *= -2.0
    d2 += np.einsum("ij,ij->i", A, A)[:, None]
    d2 += np.einsum("ij,ij->i", B, B)[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def kernel_multiplier(gamma, conv=DEFAULT_CONVENTION):
    """Return the factor ``g`` such that the kernel equals ``exp(-g * d2)``."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0) or not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be positive and finite")
    conv = KernelConvention(conv)
    if conv is KernelConvention.MULTIPLIER:
        return gamma
    return 1.0 / gamma


def rbf_kernel(a, b, gamma: float, conv=DEFAULT_CONVENTION) -> float:
    g = kernel_multiplier(gamma, conv)
    return float(np.exp(-g * squared_euclidean(a, b)))


def rbf_kernel_matrix(A, B, gamma, conv=DEFAULT_CONVENTION):
    """Gaussian kernel between row sets; ``gamma`` may be per-column of ``B``."""
    g = kernel_multiplier(gamma, conv)
    return np.exp(-pairwise_sq_dists(A, B) * g)


def finite_difference_gradient(f, x, h: float = 1e-5, order: int = 2):
    """Central-difference gradient of a scalar field ``f`` at ``x``.

    ``order=4`` uses the five-point stencil, which tolerates larger ``h`` and
    so loses less to rounding where the gradient is small.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    if order == 2:
        steps, weights, denom = (1, -1), (1.0, -1.0), 2.0
    elif order == 4:
        steps, weights, denom = (2, 1, -1, -2), (-1.0, 8.0, -8.0, 1.0), 12.0
    else:
        raise ValueError("order must be 2 or 4")
    x = _vec(x).copy()
    grad = np.empty_like(x)
    for j in range(x.size):
        orig = x[j]
        vals = []
        for k in steps:
            x[j] = orig + k * h
            vals.append(f(x))
        x[j] = orig
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite function value near coordinate {j}")
        grad[j] = sum(w * v for w, v in zip(weights, vals)) / (denom * h)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a, b = _vec(a), _vec(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


class SeedStreams:
    """Named, independent random generators derived from one seed.

    ``streams.get("attack")`` always yields a fresh generator positioned at the
    start of the same stream, so callers never share state by accident.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)

    def get(self, name: str) -> np.random.Generator:
        digest = hashlib.sha256(name.encode()).digest()
        key = int.from_bytes(digest[:8], "little")
        return np.random.default_rng([self.seed, key])

    def child_seed(self, name: str) -> int:
        return int(self.get(name).integers(0, 2**31 - 1))
