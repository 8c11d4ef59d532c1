"""Layer detectors: map a tapped representation to one score per class."""

from .io import dumps_detector, load_detector, loads_detector, save_detector
from .kde import KDEModel, fit_kde
from .knn import KNNModel, fit_knn
from .rbfnet import RBFNetModel, fit_rbf_net
from .svm import SVMRBFModel, fit_svm_rbf, kkt_violations, smo_binary

DETECTOR_TYPES = (RBFNetModel, SVMRBFModel, KNNModel, KDEModel)


def detector_score(model, z):
    """Per-class scores; higher means more on-manifold for that class."""
    return model.scores(z)


def detector_grad(model, z, upstream):
    """Gradient of ``<upstream, scores(z)>`` with respect to ``z``."""
    return model.score_grad(z, upstream)


def prototype_count(model) -> int:
    return int(model.prototype_count)


def fit_detector(kind, Z, labels, n_classes, seed=0, **params):
    """Fit a detector by variant name; ``params`` are variant hyperparameters."""
    if kind == "svm":
        return fit_svm_rbf(Z, labels, n_classes=n_classes, **params)
    if kind == "rbfnet":
        return fit_rbf_net(Z, labels, n_classes=n_classes, seed=seed, **params)
    if kind == "knn":
        return fit_knn(Z, labels, n_classes=n_classes, **params)
    if kind == "kde":
        return fit_kde(Z, labels, n_classes=n_classes, **params)
    raise ValueError(f"unknown detector kind {kind!r}")


__all__ = [
    "DETECTOR_TYPES",
    "KDEModel",
    "KNNModel",
    "RBFNetModel",
    "SVMRBFModel",
    "detector_grad",
    "detector_score",
    "dumps_detector",
    "fit_detector",
    "fit_kde",
    "fit_knn",
    "fit_rbf_net",
    "fit_svm_rbf",
    "kkt_violations",
    "load_detector",
    "loads_detector",
    "prototype_count",
    "save_detector",
    "smo_binary",
]
