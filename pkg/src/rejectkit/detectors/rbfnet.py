"""Fixed-budget RBF networks with trainable prototypes and bandwidths.

Scores are ``s_c(z) = sum_i W[c, i] * k_i(z) + b_c`` where ``k_i`` is a
Gaussian bump centred on prototype ``i`` with its own bandwidth.  Prototypes,
log-bandwidths, output weights and biases are fitted jointly with Adam on
softmax cross-entropy.  The number of prototypes never changes after
construction, which is what bounds the per-query cost.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.cluster.vq import kmeans2

from ..errors import TrainingError
from ..mathutils import (
    DEFAULT_CONVENTION,
    KernelConvention,
    SeedStreams,
    kernel_multiplier,
    pairwise_sq_dists,
)
from .base import check_dim, expansion_grad, expansion_scores, kernel_basis


@dataclass
class RBFNetModel:
    prototypes: np.ndarray  # (r, d)
    bandwidths: np.ndarray  # (r,)
    out_weights: np.ndarray  # (c, r)
    out_bias: np.ndarray  # (c,)
    convention: KernelConvention = DEFAULT_CONVENTION
    variant = "rbfnet"

    def __post_init__(self):
        self.convention = KernelConvention(self.convention)
        r = self.prototypes.shape[0]
        if r < 1:
            raise ValueError("an RBF network needs at least one prototype")
        if self.bandwidths.shape != (r,) or np.any(self.bandwidths <= 0):
            raise ValueError("need one positive bandwidth per prototype")
        if self.out_weights.shape != (self.out_bias.shape[0], r):
            raise ValueError("out_weights must be (classes, prototypes)")
        self._g = kernel_multiplier(self.bandwidths, self.convention)
        self._basis = kernel_basis(self.prototypes, self._g)

    @property
    def dim(self):
        return self.prototypes.shape[1]

    @property
    def n_classes(self):
        return self.out_bias.shape[0]

    @property
    def prototype_count(self):
        return self.prototypes.shape[0]

    def scores(self, Z):
        Z, single = check_dim(Z, self.dim)
        s, _ = expansion_scores(Z, self._basis, self.out_weights, self.out_bias)
        return s[0] if single else s

    def score_grad(self, Z, U):
        Z, single = check_dim(Z, self.dim)
        U = np.atleast_2d(U)
        g = expansion_grad(Z, self.prototypes, self._g, self.out_weights, U, basis=self._basis)
        return g[0] if single else g

    def scores_and_grad(self, Z):
        """Batch scores plus a closure ``U -> gradient`` reusing the kernel values."""
        s, K = expansion_scores(Z, self._basis, self.out_weights, self.out_bias)
        return s, lambda U: expansion_grad(Z, self.prototypes, self._g, self.out_weights, U, K=K)

    def with_gamma_scale(self, scale):
        """Copy whose kernel multipliers are scaled by ``scale``."""
        if self.convention is KernelConvention.MULTIPLIER:
            bw = self.bandwidths * scale
        else:
            bw = self.bandwidths / scale
        return replace(self, bandwidths=bw)

    def score_bound(self):
        return np.abs(self.out_weights).sum(1) + np.abs(self.out_bias)


def _split_budget(counts, r):
    """Spread ``r`` prototypes evenly over classes; leftovers go to the largest."""
    c = len(counts)
    share = np.full(c, r // c)
    by_size = sorted(range(c), key=lambda k: (-counts[k], k))
    for k in by_size[: r - share.sum()]:
        share[k] += 1
    return share


def init_prototypes(Z, labels, r, classes, rng):
    counts = [int((labels == k).sum()) for k in classes]
    share = _split_budget(counts, r)
    protos, owner = [], []
    for k, m in zip(classes, share):
        if m == 0:
            continue
        pts = Z[labels == k]
        m = int(m)
        if m >= len(pts):
            centers = pts[rng.choice(len(pts), size=m, replace=m > len(pts))]
        elif m == 1:
            centers = pts.mean(0, keepdims=True)
        else:
            centers, _ = kmeans2(pts, m, minit="++", seed=rng)
        protos.append(centers)
        owner.extend([k] * m)
    return np.vstack(protos), np.asarray(owner)


class _Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _forward(Z, P, logbw, W, b, conv):
    mult = kernel_multiplier(np.exp(logbw), conv)
    d2 = pairwise_sq_dists(Z, P)
    K = np.exp(-d2 * mult)
    return K @ W.T + b, (Z, P, W, K, d2, mult, conv)


def _backward(D, cache):
    """Parameter gradients ``[P, log-bandwidth, W, b]`` for score cotangent ``D``."""
    Z, P, W, K, d2, mult, conv = cache
    gW = D.T @ K
    gb = D.sum(0)
    dK = (D @ W) * K
    A = dK * (2.0 * mult)
    gP = A.T @ Z - A.sum(0)[:, None] * P
    sign = -1.0 if conv is KernelConvention.MULTIPLIER else 1.0
    glog = sign * mult * (dK * d2).sum(0)
    return [gP, glog, gW, gb]


def softmax_xent_cotangent(s, labels):
    """Mean cross-entropy of ``softmax(s)`` and its gradient w.r.t. ``s``."""
    s = s - s.max(1, keepdims=True)
    logp = s - np.log(np.exp(s).sum(1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    D = np.exp(logp)
    D[np.arange(n), labels] -= 1.0
    return loss, D / n


def _loss_and_grads(Z, labels, P, logbw, W, b, conv):
    s, cache = _forward(Z, P, logbw, W, b, conv)
    loss, D = softmax_xent_cotangent(s, labels)
    return loss, _backward(D, cache)


def fit_rbf_net(Z, labels, r, epochs=250, seed=0, batch_size=32, lr=1e-3,
                n_classes=None, convention=DEFAULT_CONVENTION, log=None):
    """Fit an RBF network with exactly ``r`` prototypes.

    Prototypes start at per-class k-means centroids; bandwidths start so that
    the kernel equals 0.5 at the median nearest-prototype distance; output
    weights start as the prototype-to-class indicator.
    """
    if r < 1:
        raise ValueError("prototype budget r must be >= 1")
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(Z) == 0:
        raise ValueError("empty training set")
    conv = KernelConvention(convention)
    c = int(n_classes if n_classes is not None else labels.max() + 1)
    streams = SeedStreams(seed)
    classes = np.unique(labels)
    P, owner = init_prototypes(Z, labels, r, classes, streams.get("rbf-init"))
    near = pairwise_sq_dists(Z, P).min(1)
    med = float(np.median(near))
    if med <= 0:
        med = float(np.mean(near)) or 1.0
    mult0 = np.log(2.0) / med
    bw0 = mult0 if conv is KernelConvention.MULTIPLIER else 1.0 / mult0
    logbw = np.full(r, np.log(bw0))
    W = np.zeros((c, r))
    W[owner, np.arange(r)] = 1.0
    b = np.zeros(c)
    params = [P, logbw, W, b]
    opt = _Adam(params, lr=lr)
    shuffle = streams.get("rbf-shuffle")
    n = len(Z)
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = _loss_and_grads(Z[idx], labels[idx], *params, conv)
            if not np.isfinite(loss):
                raise TrainingError(f"RBF network training diverged at epoch {epoch}")
            opt.step(params, grads)
            total += loss * len(idx)
        if log is not None:
            log(epoch, total / n)
    return RBFNetModel(P.copy(), np.exp(logbw), W.copy(), b.copy(), conv)


def finetune_rbf_stack(layer_nets, combiner, tap_values, labels, epochs=10, seed=0,
                       batch_size=32, lr=1e-3, log=None):
    """Jointly refine RBF layer detectors and an RBF combiner on the stacked loss.

    ``tap_values[i]`` holds the inputs of ``layer_nets[i]``; the combiner sees
    their concatenated scores.  Gradients flow from the combiner's
    cross-entropy into every layer network.  Returns new models.
    """
    nets = list(layer_nets) + [combiner]
    if not all(isinstance(m, RBFNetModel) for m in nets):
        raise TypeError("joint fine-tuning needs RBF networks throughout")
    labels = np.asarray(labels, dtype=np.int64)
    groups = [[m.prototypes.copy(), np.log(m.bandwidths), m.out_weights.copy(), m.out_bias.copy()]
              for m in nets]
    flat = [p for g in groups for p in g]
    opt = _Adam(flat, lr=lr)
    shuffle = SeedStreams(seed).get("joint-shuffle")
    n = len(labels)
    k = len(layer_nets)
    for epoch in range(1, epochs + 1):
        total = 0.0
        order = shuffle.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            outs, caches = [], []
            for i in range(k):
                s, cache = _forward(tap_values[i][idx], *groups[i], nets[i].convention)
                outs.append(s)
                caches.append(cache)
            flat_s = np.hstack(outs)
            o, ccache = _forward(flat_s, *groups[k], combiner.convention)
            loss, D = softmax_xent_cotangent(o, labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"joint fine-tuning diverged at epoch {epoch}")
            grads = [None] * (k + 1)
            grads[k] = _backward(D, ccache)
            mult = kernel_multiplier(np.exp(groups[k][1]), combiner.convention)
            dS = expansion_grad(flat_s, groups[k][0], mult, groups[k][2], D)
            widths = np.cumsum([0] + [s.shape[1] for s in outs])
            for i in range(k):
                grads[i] = _backward(dS[:, widths[i]:widths[i + 1]], caches[i])
            opt.step(flat, [g for gs in grads for g in gs])
            total += loss * len(idx)
        if log is not None:
            log(epoch, total / n)
    return [RBFNetModel(P.copy(), np.exp(lb), W.copy(), b.copy(), m.convention)
            for (P, lb, W, b), m in zip(groups, nets)]
