"""Shared helpers for kernel-expansion detectors.

Detectors built on these helpers cache a kernel basis at construction, so
their arrays must not be modified in place afterwards; derive new models
with ``dataclasses.replace`` instead.
"""

from __future__ import annotations

import numpy as np


def check_dim(Z, dim):
    Z = np.asarray(Z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != dim:
        raise ValueError(f"representation has dim {Z.shape[1]}, detector expects {dim}")
    return Z, single


def kernel_basis(centers, mult):
    """Rows ``[2 g_j c_j, -g_j ||c_j||^2, -g_j]``.

    With ``a(z) = [z, 1, ||z||^2]`` the product ``a(z) . basis_j`` equals
    ``-g_j ||z - c_j||^2``, so one matrix product yields every kernel exponent.
    """
    centers = np.asarray(centers, dtype=np.float64)
    g = np.broadcast_to(np.asarray(mult, dtype=np.float64), (len(centers),))
    sq = np.einsum("ij,ij->i", centers, centers)
    return np.hstack([2.0 * g[:, None] * centers, (-g * sq)[:, None], -g[:, None]])


def _kernel(Z, basis):
    n, d = Z.shape
    A = np.empty((n, d + 2))
    A[:, :d] = Z
    A[:, d] = 1.0
    A[:, d + 1] = np.einsum("ij,ij->i", Z, Z)
    E = A @ basis.T
    np.minimum(E, 0.0, out=E)  # cancellation can push the exponent slightly above 0
    return np.exp(E, out=E)


def expansion_scores(Z, basis, coef, bias):
    """``s_c(z) = sum_j coef[c, j] * exp(-mult_j * ||z - centers_j||^2) + bias_c``; returns ``(s, K)``."""
    K = _kernel(Z, basis)
    return K @ coef.T + bias, K


def expansion_grad(Z, centers, mult, coef, U, K=None, basis=None):
    """Gradient w.r.t. ``Z`` of ``sum_c U[:, c] * s_c(Z)`` for a kernel expansion."""
    if K is None:
        K = _kernel(Z, kernel_basis(centers, mult) if basis is None else basis)
    A = (U @ coef) * K * (-2.0 * mult)
    return A.sum(1)[:, None] * Z - A @ centers
