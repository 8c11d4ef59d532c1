"""One-vs-all soft-margin SVMs with an RBF kernel, trained by SMO.

The binary solver follows the usual second-order working-set selection on a
precomputed kernel matrix.  An optional polishing step re-solves the KKT
linear system on the free support vectors once the active set has settled,
which tightens the dual objective to near machine precision on small problems.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import TrainingError
from ..mathutils import DEFAULT_CONVENTION, KernelConvention, kernel_multiplier, rbf_kernel_matrix
from .base import check_dim, expansion_grad, expansion_scores, kernel_basis

TAU = 1e-12


@dataclass
class BinarySVMSolution:
    alpha: np.ndarray
    rho: float
    iterations: int
    gap: float  # max KKT violation m(alpha) - M(alpha) at exit

    def dual_objective(self, K, y):
        ya = self.alpha * y
        return float(self.alpha.sum() - 0.5 * ya @ K @ ya)


def _bounds(alpha, C, eps=0.0):
    return alpha >= C - eps, alpha <= eps


def _rho_from_gradient(alpha, G, y, C):
    at_upper, at_lower = _bounds(alpha, C)
    free = ~(at_upper | at_lower)
    yG = y * G
    if free.any():
        return float(yG[free].mean())
    # no free variables: midpoint of the feasible interval
    up = np.where((at_upper & (y == -1)) | (at_lower & (y == 1)), yG, np.inf).min()
    lo = np.where((at_upper & (y == 1)) | (at_lower & (y == -1)), yG, -np.inf).max()
    if not np.isfinite(up):
        up = lo
    if not np.isfinite(lo):
        lo = up
    return float((up + lo) / 2.0)


def smo_binary(K, y, C, tol=1e-3, max_iter=None, polish=True, polish_limit=1500):
    """Solve ``max sum(a) - 1/2 a'Qa  s.t. 0 <= a <= C, y'a = 0``.

    ``K`` is the (n, n) kernel matrix and ``y`` holds +-1 labels.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if max_iter is None:
        max_iter = max(100_000, 100 * n)
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of the minimisation form
    QD = np.diag(K).copy()
    it = 0
    gap = np.inf
    while it < max_iter:
        v = -y * G
        up_mask = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low_mask = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        v_up = np.where(up_mask, v, -np.inf)
        i = int(np.argmax(v_up))
        m = v_up[i]
        v_low = np.where(low_mask, v, np.inf)
        M = v_low.min()
        gap = m - M
        if gap < tol:
            break
        Ki = K[i]
        b_it = m - v
        a_it = QD[i] + QD - 2.0 * Ki
        a_it = np.where(a_it > 0, a_it, TAU)
        score = np.where(low_mask & (b_it > 0), -(b_it * b_it) / a_it, np.inf)
        j = int(np.argmin(score))
        Kj = K[j]
        yi, yj = y[i], y[j]
        ai_old, aj_old = alpha[i], alpha[j]
        if yi != yj:
            quad = QD[i] + QD[j] - 2.0 * Ki[j]
            quad = quad if quad > 0 else TAU
            delta = (-G[i] - G[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Ki[j]
            quad = quad if quad > 0 else TAU
            delta = (G[i] - G[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        dai, daj = ai - ai_old, aj - aj_old
        G += y * (yi * dai * Ki + yj * daj * Kj)
        it += 1
    else:
        raise TrainingError(
            f"SMO did not converge in {max_iter} iterations (KKT violation {gap:.3g} > {tol:g})"
        )
    rho = _rho_from_gradient(alpha, G, y, C)
    sol = BinarySVMSolution(alpha, rho, it, float(gap))
    if polish:
        sol = _polish(K, y, C, sol, tol, polish_limit)
    return sol


def _polish(K, y, C, sol, tol, limit):
    """Re-solve the equality system on the free set; keep it only if it is KKT-feasible."""
    alpha = sol.alpha
    eps = 1e-8 * C
    upper = alpha >= C - eps
    lower = alpha <= eps
    free = ~(upper | lower)
    nf = int(free.sum())
    if nf == 0 or nf > limit:
        return sol
    fixed = np.where(upper, C, 0.0)
    F = np.flatnonzero(free)
    B = np.flatnonzero(~free)
    A = np.zeros((nf + 1, nf + 1))
    A[:nf, :nf] = K[np.ix_(F, F)] * y[F][None, :]
    A[:nf, nf] = -1.0
    A[nf, :nf] = y[F]
    rhs = np.empty(nf + 1)
    rhs[:nf] = y[F] - K[np.ix_(F, B)] @ (fixed[B] * y[B])
    rhs[nf] = -(fixed[B] * y[B]).sum()
    try:
        x = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        return sol
    a_new = fixed.copy()
    a_new[F] = x[:nf]
    if np.any(a_new[F] < -eps) or np.any(a_new[F] > C + eps):
        return sol
    a_new = np.clip(a_new, 0.0, C)
    rho = float(x[nf])
    f = K @ (a_new * y) - rho
    margin = y * f
    slack = max(tol, 1e-6)
    if np.any(margin[lower] < 1 - slack) or np.any(margin[upper] > 1 + slack):
        return sol
    candidate = BinarySVMSolution(a_new, rho, sol.iterations, sol.gap)
    if candidate.dual_objective(K, y) + 1e-12 < sol.dual_objective(K, y):
        return sol
    return candidate


@dataclass
class SVMRBFModel:
    support_vectors: np.ndarray  # (n_sv, d)
    dual_coefs: np.ndarray  # (c, n_sv), y_i * alpha_i per one-vs-all machine
    bias: np.ndarray  # (c,)
    gamma: float
    C: float
    convention: KernelConvention = DEFAULT_CONVENTION
    variant = "svm"

    def __post_init__(self):
        self.convention = KernelConvention(self.convention)
        if self.gamma <= 0 or self.C <= 0:
            raise ValueError("gamma and C must be positive")
        self._g = float(kernel_multiplier(self.gamma, self.convention))
        self._basis = kernel_basis(self.support_vectors, self._g)

    @property
    def dim(self):
        return self.support_vectors.shape[1]

    @property
    def n_classes(self):
        return self.bias.shape[0]

    @property
    def prototype_count(self):
        return self.support_vectors.shape[0]

    def scores(self, Z):
        Z, single = check_dim(Z, self.dim)
        s, _ = expansion_scores(Z, self._basis, self.dual_coefs, self.bias)
        return s[0] if single else s

    def score_grad(self, Z, U):
        Z, single = check_dim(Z, self.dim)
        g = expansion_grad(Z, self.support_vectors, self._g, self.dual_coefs, np.atleast_2d(U),
                           basis=self._basis)
        return g[0] if single else g

    def scores_and_grad(self, Z):
        s, K = expansion_scores(Z, self._basis, self.dual_coefs, self.bias)
        return s, lambda U: expansion_grad(Z, self.support_vectors, self._g, self.dual_coefs, U, K=K)

    def with_gamma_scale(self, scale):
        if self.convention is KernelConvention.MULTIPLIER:
            return replace(self, gamma=self.gamma * scale)
        return replace(self, gamma=self.gamma / scale)


def fit_svm_rbf(Z, labels, C=1.0, gamma=1.0, n_classes=None, tol=1e-3,
                convention=DEFAULT_CONVENTION, polish=True, return_solutions=False):
    """One-vs-all RBF SVMs; support vectors are the points with alpha > 0 in any machine."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError("degenerate labels: SVM training needs at least two classes")
    c = int(n_classes if n_classes is not None else labels.max() + 1)
    K = rbf_kernel_matrix(Z, Z, gamma, convention)
    coefs = np.zeros((c, len(Z)))
    bias = np.zeros(c)
    solutions = {}
    for k in range(c):
        y = np.where(labels == k, 1.0, -1.0)
        if not (y > 0).any():
            # class absent from training data: constant, strongly negative score
            bias[k] = -1.0
            continue
        sol = smo_binary(K, y, C, tol=tol, polish=polish)
        coefs[k] = sol.alpha * y
        bias[k] = -sol.rho
        solutions[k] = sol
    used = np.flatnonzero(np.any(coefs != 0, axis=0))
    model = SVMRBFModel(Z[used].copy(), coefs[:, used].copy(), bias, float(gamma), float(C), convention)
    if return_solutions:
        return model, solutions, K
    return model


def kkt_violations(K, y, C, alpha, rho):
    """Per-point KKT violation of a binary solution (0 where satisfied)."""
    f = K @ (alpha * y) - rho
    m = y * f
    eps = 1e-8 * C
    viol = np.zeros_like(m)
    lo = alpha <= eps
    hi = alpha >= C - eps
    free = ~(lo | hi)
    viol[lo] = np.maximum(0.0, 1 - m[lo])
    viol[hi] = np.maximum(0.0, m[hi] - 1)
    viol[free] = np.abs(m[free] - 1)
    return viol


C_GRID = tuple(10.0 ** np.arange(-2, 3))
GAMMA_GRID = tuple(10.0 ** np.arange(-4, 3))


def select_svm_params(Z, labels, C_grid=C_GRID, gamma_grid=GAMMA_GRID, folds=3, seed=0,
                      n_classes=None, max_points=None):
    """Pick (C, gamma) by stratified k-fold accuracy; returns ``(C, gamma, table)``.

    Ties go to the earlier grid entry.  ``max_points`` caps the number of
    points used (a stratified subsample) to bound the cost.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if max_points is not None and len(Z) > max_points:
        keep = np.sort(rng.choice(len(Z), size=max_points, replace=False))
        Z, labels = Z[keep], labels[keep]
    fold = np.empty(len(Z), dtype=np.int64)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold[idx] = np.arange(len(idx)) % folds
    table = {}
    best = None
    for C in C_grid:
        for g in gamma_grid:
            correct = 0
            for f in range(folds):
                tr, te = fold != f, fold == f
                m = fit_svm_rbf(Z[tr], labels[tr], C=C, gamma=g, n_classes=n_classes)
                correct += int((m.scores(Z[te]).argmax(1) == labels[te]).sum())
            acc = correct / len(Z)
            table[(float(C), float(g))] = acc
            if best is None or acc > best[0]:
                best = (acc, float(C), float(g))
    return best[1], best[2], table
