"""Score matrix, multilayer combiner and the rejection rule.

A :class:`DefendedClassifier` taps ``k`` layers of a backbone, scores each tap
with a layer detector, stacks the ``k`` score vectors into a ``(k, c)`` matrix
``S`` and combines it into one score vector ``o``.  The final ``c + 1`` scores
put the rejection threshold at index 0 followed by ``o + alpha * softmax(logits)``;
the argmax decides, with ties going to the reject class.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import LOGITS, NetworkModel, load_model, save_model, softmax
from .detectors import fit_detector, load_detector, save_detector
from .detectors.rbfnet import finetune_rbf_stack
from .errors import ConfigError, ParseError, UnsupportedVersionError
from .mathutils import SeedStreams

REJECT = 0
BUNDLE_FORMAT = "rejectkit-bundle"
BUNDLE_VERSION = 1


@dataclass
class RejectionDecision:
    extended_scores: np.ndarray
    predicted: int
    rejected: bool


def omega(y, o, theta, alpha=0.0) -> RejectionDecision:
    """Append the threshold as reject score and take the argmax (ties reject)."""
    y = np.asarray(y, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if y.shape != o.shape:
        raise ValueError("DNN and detector scores must have the same length")
    ext = np.concatenate([[theta], o + alpha * y])
    pred = int(np.argmax(ext))
    return RejectionDecision(ext, pred, pred == REJECT)


def extend_scores(o, theta, y=None, alpha=0.0):
    """Batched form of :func:`omega`'s score vector: ``(n, c) -> (n, c + 1)``."""
    o = np.atleast_2d(o)
    if alpha and y is not None:
        o = o + alpha * np.atleast_2d(y)
    return np.hstack([np.full((len(o), 1), float(theta)), o])


def decide(ext):
    """Predicted extended index per row; 0 means rejected."""
    return np.argmax(ext, axis=-1)


class UndefendedClassifier:
    """Backbone alone, exposed through the extended-score interface (never rejects)."""

    def __init__(self, backbone: NetworkModel, name="undefended"):
        self.backbone = backbone
        self.name = name

    @property
    def n_classes(self):
        return self.backbone.class_count

    def extended_scores(self, X):
        logits = np.atleast_2d(self.backbone.forward(X)[0])
        return np.hstack([np.full((len(logits), 1), -np.inf), logits])

    def extended_scores_and_vjp(self, X):
        logits, _, cache = self.backbone.forward(np.atleast_2d(X), keep_cache=True)
        ext = np.hstack([np.full((len(logits), 1), -np.inf), logits])
        return ext, lambda U: self.backbone.vjp(cache, {LOGITS: np.atleast_2d(U)[:, 1:]})

    def extended_vjp(self, X, U):
        return self.extended_scores_and_vjp(X)[1](U)

    def predict(self, X):
        return decide(self.extended_scores(X))

    def with_gamma_scale(self, scale):
        return self

    def prototype_totals(self):
        return {}


@dataclass
class DefendedClassifier:
    backbone: NetworkModel
    taps: list
    layer_detectors: list
    combiner: Optional[object] = None  # None is the identity combiner
    theta: float = 0.0
    alpha: float = 0.0
    name: str = "defended"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.taps) != len(self.layer_detectors) or not self.taps:
            raise ConfigError("need one layer detector per tap")
        if self.combiner is None and len(self.taps) != 1:
            raise ConfigError("the identity combiner requires exactly one inspected layer")
        if not np.isfinite(self.theta):
            raise ConfigError("theta must be finite")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        for tap, det in zip(self.taps, self.layer_detectors):
            if self.backbone.tap_dim(tap) != det.dim:
                raise ConfigError(f"detector on tap {tap!r} expects dim {det.dim}")

    @property
    def n_classes(self):
        return self.backbone.class_count

    @property
    def k(self):
        return len(self.taps)

    def _forward(self, X, keep_cache=False):
        return self.backbone.forward(np.atleast_2d(X), keep_cache=keep_cache)

    def score_matrix(self, X, taps=None):
        """``(n, k, c)`` stack of layer-detector scores."""
        if taps is None:
            taps = self._forward(X)[1]
        return np.stack([np.atleast_2d(det.scores(taps[t])) for t, det in zip(self.taps, self.layer_detectors)], axis=1)

    def combine(self, S):
        return combine(self.combiner, S)

    def combined_scores(self, X):
        return self.combine(self.score_matrix(X))

    def extended_scores(self, X):
        logits, taps = self._forward(X)
        o = self.combine(self.score_matrix(X, taps))
        y = softmax(logits) if self.alpha else None
        return extend_scores(o, self.theta, y, self.alpha)

    def predict(self, X):
        return decide(self.extended_scores(X))

    def extended_scores_and_vjp(self, X):
        """Extended scores plus a closure ``U -> gradient w.r.t. X of sum(U * scores)``.

        One forward pass and one kernel evaluation per detector serve both.
        """
        logits, taps, cache = self._forward(X, keep_cache=True)
        outs, grads = [], []
        for t, det in zip(self.taps, self.layer_detectors):
            s, g = det.scores_and_grad(taps[t])
            outs.append(s)
            grads.append(g)
        S = np.stack(outs, axis=1)
        n, k, c = S.shape
        if self.combiner is None:
            o, comb_grad = S[:, 0, :], None
        else:
            o, comb_grad = self.combiner.scores_and_grad(S.reshape(n, k * c))
        p = softmax(logits) if self.alpha else None
        ext = extend_scores(o, self.theta, p, self.alpha)

        def vjp(U):
            Uo = np.atleast_2d(U)[:, 1:]
            US = Uo[:, None, :] if comb_grad is None else comb_grad(Uo).reshape(n, k, c)
            upstream = {}
            for i, t in enumerate(self.taps):
                upstream[t] = upstream.get(t, 0) + grads[i](US[:, i, :])
            if self.alpha:
                Ua = self.alpha * Uo
                upstream[LOGITS] = upstream.get(LOGITS, 0) + p * (Ua - (Ua * p).sum(1, keepdims=True))
            return self.backbone.vjp(cache, upstream)

        return ext, vjp

    def extended_vjp(self, X, U):
        """Gradient w.r.t. ``X`` of ``sum(U * extended_scores(X))``; ``U`` is ``(n, c+1)``."""
        return self.extended_scores_and_vjp(X)[1](U)

    def with_gamma_scale(self, scale):
        """Copy with every detector kernel (layers and combiner) widened by ``scale``."""
        if not 0 < scale <= 1:
            raise ValueError("gamma_scale must lie in (0, 1]")
        if scale == 1:
            return self
        return replace(
            self,
            layer_detectors=[d.with_gamma_scale(scale) for d in self.layer_detectors],
            combiner=None if self.combiner is None else self.combiner.with_gamma_scale(scale),
        )

    def prototype_totals(self):
        out = {t: int(d.prototype_count) for t, d in zip(self.taps, self.layer_detectors)}
        if self.combiner is not None:
            out["combiner"] = int(self.combiner.prototype_count)
        return out

    def detector_latency_fn(self, x):
        """Closure evaluating detectors + combiner for one sample with taps precomputed."""
        taps = {t: np.atleast_2d(v) for t, v in self._forward(x)[1].items()}

        def run():
            return self.combine(self.score_matrix(None, taps))

        return run


def build_score_matrix(dc: DefendedClassifier, x):
    """``(k, c)`` score matrix for one input (``(n, k, c)`` for a batch)."""
    S = dc.score_matrix(x)
    return S[0] if np.ndim(x) == 1 else S


def combine(sigma, S):
    S = np.asarray(S, dtype=np.float64)
    single = S.ndim == 2
    S = S[None] if single else S
    n, k, c = S.shape
    if sigma is None:
        if k != 1:
            raise ConfigError("identity combiner used with more than one layer")
        o = S[:, 0, :]
    else:
        o = np.atleast_2d(sigma.scores(S.reshape(n, k * c)))
    return o[0] if single else o


# --------------------------------------------------------------------------
# stacked generalisation


def stratified_folds(y, folds, rng):
    if folds < 2:
        raise ValueError("stacked generalisation needs at least 2 folds")
    y = np.asarray(y)
    assignment = np.empty(len(y), dtype=np.int64)
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        assignment[idx] = np.arange(len(idx)) % folds
    classes = set(np.unique(y).tolist())
    for f in range(folds):
        if set(np.unique(y[assignment == f]).tolist()) != classes:
            raise ValueError(f"stratification error: fold {f} is missing a class")
    return assignment


def fit_stacked(backbone, taps, detector_specs, combiner_spec, X, y, folds=3, seed=0, n_classes=None):
    """Fit layer detectors and a combiner by stacked generalisation.

    Each fold's held-out points are scored by detectors trained on the other
    folds; the combiner is trained on those out-of-fold score matrices, and the
    layer detectors are finally refitted on all of ``X``.

    Returns ``(layer_detectors, combiner, oof_scores)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    c = int(n_classes or backbone.class_count)
    streams = SeedStreams(seed)
    assignment = stratified_folds(y, folds, streams.get("folds"))
    _, tapvals = backbone.forward(X)
    oof = np.zeros((len(X), len(taps), c))
    for f in range(folds):
        train, held = assignment != f, assignment == f
        for i, (t, spec) in enumerate(zip(taps, detector_specs)):
            det = _fit_spec(spec, tapvals[t][train], y[train], c, streams.child_seed(f"fold{f}-det{i}"))
            oof[held, i, :] = det.scores(tapvals[t][held])
    combiner = _fit_spec(combiner_spec, oof.reshape(len(X), -1), y, c, streams.child_seed("combiner"))
    layer_detectors = [
        _fit_spec(spec, tapvals[t], y, c, streams.child_seed(f"final-det{i}"))
        for i, (t, spec) in enumerate(zip(taps, detector_specs))
    ]
    return layer_detectors, combiner, oof


def _fit_spec(spec, Z, y, c, seed):
    params = dict(spec)
    kind = params.pop("kind")
    return fit_detector(kind, Z, y, c, seed=seed, **params)


def assemble_defense(backbone, taps, detector_specs, combiner_spec, X, y, folds=3, seed=0, alpha=0.0, name="defended"):
    """Fit a defended classifier (stacked when more than one layer is inspected); theta left at 0."""
    taps = list(taps)
    if len(taps) == 1 and combiner_spec is None:
        _, tapvals = backbone.forward(X)
        det = _fit_spec(detector_specs[0], tapvals[taps[0]], y, backbone.class_count,
                        SeedStreams(seed).child_seed("final-det0"))
        return DefendedClassifier(backbone, taps, [det], None, 0.0, alpha, name, {"training": "single-layer"})
    if combiner_spec is None:
        raise ConfigError("a multi-layer defence needs a combiner")
    dets, comb, _ = fit_stacked(backbone, taps, detector_specs, combiner_spec, X, y, folds, seed)
    return DefendedClassifier(backbone, taps, dets, comb, 0.0, alpha, name, {"training": "stage-wise"})


def joint_finetune(dc: DefendedClassifier, X, y, epochs=10, seed=0, lr=1e-3, batch_size=32):
    """Refine a stage-wise fitted all-RBF defence end to end; the backbone stays frozen.

    Theta is kept; recalibrate afterwards.  ``meta["training"]`` records the pass.
    """
    if dc.combiner is None:
        raise ConfigError("joint fine-tuning needs a learned combiner")
    _, taps = dc.backbone.forward(np.atleast_2d(X))
    models = finetune_rbf_stack(dc.layer_detectors, dc.combiner, [taps[t] for t in dc.taps], y,
                                epochs=epochs, seed=seed, lr=lr, batch_size=batch_size)
    meta = dict(dc.meta, training="stage-wise+joint", joint_epochs=int(epochs))
    return replace(dc, layer_detectors=models[:-1], combiner=models[-1], meta=meta)


# --------------------------------------------------------------------------
# threshold calibration


def calibrate_scores(max_scores, target_reject_rate=0.10):
    """Threshold rejecting the largest achievable fraction <= target of ``max_scores``.

    Rejected means ``score <= theta``.  The threshold sits midway between the
    two order statistics that straddle the cut.
    """
    m = np.sort(np.asarray(max_scores, dtype=np.float64))
    n = len(m)
    if n == 0:
        raise ValueError("empty calibration set")
    if not 0 <= target_reject_rate < 1:
        raise ValueError("target rejection rate must lie in [0, 1)")
    if m[0] == m[-1]:
        warnings.warn("degenerate calibration scores: all equal", RuntimeWarning, stacklevel=2)
        return float(m[0] - max(1e-6, 1e-6 * abs(m[0])))
    k = int(np.floor(target_reject_rate * n + 1e-9))
    # step back over ties so exactly k points fall at or below theta
    while k > 0 and m[k - 1] == m[k]:
        k -= 1
    if k == 0:
        gap = m[np.searchsorted(m, m[0], side="right")] - m[0]
        theta = m[0] - 0.5 * gap
        # adjacent floats: the half gap can round to zero
        return float(theta if theta < m[0] else np.nextafter(m[0], -np.inf))
    theta = 0.5 * (m[k - 1] + m[k])
    return float(theta if theta < m[k] else m[k - 1])


def calibrate_threshold(dc: DefendedClassifier, X_val, target_reject_rate=0.10):
    logits, taps = dc.backbone.forward(np.atleast_2d(X_val))
    o = dc.combine(dc.score_matrix(None, taps))
    if dc.alpha:
        o = o + dc.alpha * softmax(logits)
    return calibrate_scores(o.max(1), target_reject_rate)


# --------------------------------------------------------------------------
# bundle persistence


def save_bundle(dc: DefendedClassifier, directory, backbone_file="backbone.txt"):
    """Write backbone, detectors and a JSON bundle referencing them by relative path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(dc.backbone, d / backbone_file)
    det_files = []
    for i, det in enumerate(dc.layer_detectors):
        name = f"{dc.name}.layer{i}.{det.variant}.txt"
        save_detector(det, d / name)
        det_files.append(name)
    comb_file = None
    if dc.combiner is not None:
        comb_file = f"{dc.name}.combiner.{dc.combiner.variant}.txt"
        save_detector(dc.combiner, d / comb_file)
    bundle = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "name": dc.name,
        "backbone": backbone_file,
        "taps": list(dc.taps),
        "layer_detectors": det_files,
        "combiner": comb_file,
        "theta": dc.theta,
        "alpha": dc.alpha,
        "meta": dc.meta,
    }
    path = d / f"{dc.name}.bundle.json"
    path.write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(path) -> DefendedClassifier:
    path = Path(path)
    try:
        b = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"bundle is not valid JSON: {exc.msg}", exc.pos) from None
    if b.get("format") != BUNDLE_FORMAT:
        raise ParseError("not a defended-classifier bundle")
    if b.get("version") != BUNDLE_VERSION:
        raise UnsupportedVersionError(f"unsupported bundle version {b.get('version')}")
    base = path.parent
    backbone = load_model(base / b["backbone"])
    dets = [load_detector(base / f) for f in b["layer_detectors"]]
    comb = load_detector(base / b["combiner"]) if b.get("combiner") else None
    return DefendedClassifier(backbone, b["taps"], dets, comb, float(b["theta"]), float(b["alpha"]),
                              b.get("name", "defended"), b.get("meta", {}))
