from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from ..mathutils import pairwise_sq_dists
from .base import check_dim


@dataclass
class KDEModel:
    """Per-class Gaussian kernel density, mapped affinely so fit-set values span [0, 1].

    ``bandwidth`` is the kernel standard deviation ``h``; the log-density of
    class ``c`` at ``z`` is ``logmeanexp(-||z - x_i||^2 / (2 h^2))`` over that
    class's points (normalising constants dropped, they cancel in the affine map).
    """

    bandwidth: float
    per_class_points: list
    offset: float = 0.0
    scale: float = 1.0
    variant = "kde"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if any(len(p) == 0 for p in self.per_class_points):
            raise ValueError("every class needs at least one point")

    @property
    def dim(self):
        return self.per_class_points[0].shape[1]

    @property
    def n_classes(self):
        return len(self.per_class_points)

    @property
    def prototype_count(self):
        return sum(len(p) for p in self.per_class_points)

    def log_density(self, Z):
        Z, _ = check_dim(Z, self.dim)
        g = 1.0 / (2.0 * self.bandwidth ** 2)
        out = np.empty((len(Z), self.n_classes))
        for c, pts in enumerate(self.per_class_points):
            out[:, c] = logsumexp(-g * pairwise_sq_dists(Z, pts), axis=1) - np.log(len(pts))
        return out

    def scores(self, Z):
        Z, single = check_dim(Z, self.dim)
        s = (self.log_density(Z) - self.offset) * self.scale
        return s[0] if single else s

    def score_grad(self, Z, U):
        Z, single = check_dim(Z, self.dim)
        U = np.atleast_2d(U)
        g = 1.0 / (2.0 * self.bandwidth ** 2)
        grad = np.zeros_like(Z)
        for c, pts in enumerate(self.per_class_points):
            logk = -g * pairwise_sq_dists(Z, pts)
            w = np.exp(logk - logsumexp(logk, axis=1, keepdims=True))  # responsibilities
            # d/dz log sum_i exp(-g||z-x_i||^2) = -2g (z - sum_i w_i x_i)
            dlog = -2.0 * g * (Z - w @ pts)
            grad += (self.scale * U[:, c])[:, None] * dlog
        return grad[0] if single else grad

    def scores_and_grad(self, Z):
        return self.scores(Z), lambda U: self.score_grad(Z, U)

    def with_gamma_scale(self, scale):
        return replace(self, bandwidth=self.bandwidth / np.sqrt(scale))


def fit_kde(Z, labels, bandwidth=1.0, n_classes=None):
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c = int(n_classes if n_classes is not None else labels.max() + 1)
    pts = [Z[labels == k].copy() for k in range(c)]
    model = KDEModel(float(bandwidth), pts)
    own = model.log_density(Z)[np.arange(len(Z)), labels]
    lo, hi = float(own.min()), float(own.max())
    scale = 1.0 / (hi - lo) if hi > lo else 1.0
    return replace(model, offset=lo, scale=scale)
