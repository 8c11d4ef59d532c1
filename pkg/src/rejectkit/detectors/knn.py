from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NotDifferentiableError
from ..mathutils import pairwise_sq_dists
from .base import check_dim


@dataclass
class KNNModel:
    """Per-class neighbour fractions among the ``k`` nearest stored points."""

    k: int
    stored_points: np.ndarray
    stored_labels: np.ndarray
    classes: int
    variant = "knn"

    def __post_init__(self):
        if not 1 <= self.k <= len(self.stored_points):
            raise ValueError("k must lie in 1..number of stored points")

    @property
    def dim(self):
        return self.stored_points.shape[1]

    @property
    def n_classes(self):
        return self.classes

    @property
    def prototype_count(self):
        return len(self.stored_points)

    def scores(self, Z):
        Z, single = check_dim(Z, self.dim)
        d2 = pairwise_sq_dists(Z, self.stored_points)
        # stable sort keeps ties deterministic
        nn = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        votes = self.stored_labels[nn]
        s = np.zeros((len(Z), self.classes))
        for c in range(self.classes):
            s[:, c] = (votes == c).mean(1)
        return s[0] if single else s

    def score_grad(self, Z, U):
        raise NotDifferentiableError(
            "k-NN scores are piecewise constant; attack a KDE or RBF detector on the "
            "same layer as a smooth surrogate, or use the black-box transfer setting"
        )

    def scores_and_grad(self, Z):
        return self.scores(Z), lambda U: self.score_grad(Z, U)

    def with_gamma_scale(self, scale):
        return self


def fit_knn(Z, labels, k=5, n_classes=None):
    labels = np.asarray(labels, dtype=np.int64)
    c = int(n_classes if n_classes is not None else labels.max() + 1)
    return KNNModel(int(k), np.asarray(Z, dtype=np.float64).copy(), labels.copy(), c)
