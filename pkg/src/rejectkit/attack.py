"""Defence-aware maximum-confidence evasion.

The attacker minimises ``s_y(x) - max_{j not in {reject, y}} s_j(x)`` inside an
l2 or l-inf ball intersected with the input box, using projected gradient
descent whose step size is chosen each iteration by trying ``eta0 * 2**k``.

Targets expose ``extended_scores(X)`` (reject score in column 0) and
``extended_vjp(X, U)``.  Both :class:`~rejectkit.defense.DefendedClassifier`
and :class:`~rejectkit.defense.UndefendedClassifier` qualify.  All routines are
vectorised over a batch of independent samples.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .defense import REJECT, UndefendedClassifier, decide


class Norm(str, enum.Enum):
    L2 = "l2"
    LINF = "linf"


@dataclass
class AttackConfig:
    epsilon: float
    norm: Norm = Norm.L2
    eta0: float = 0.01
    conv_tol: float = 1e-6
    max_outer_iters: int = 1000
    doublings: int = 10
    box: Optional[tuple] = (0.0, 1.0)

    def __post_init__(self):
        self.norm = Norm(self.norm)
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.eta0 <= 0 or self.conv_tol <= 0:
            raise ValueError("eta0 and conv_tol must be positive")
        if self.doublings < 1 or self.max_outer_iters < 1:
            raise ValueError("doublings and max_outer_iters must be >= 1")
        if self.box is not None:
            self.box = (float(self.box[0]), float(self.box[1]))


@dataclass
class SurrogateSpec:
    gamma_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma_scale <= 1:
            raise ValueError("gamma_scale must lie in (0, 1]")


@dataclass
class AttackResult:
    x_star: np.ndarray
    omega_trace: list
    success: bool
    iterations: int
    converged: bool = True
    rejected: bool = False
    predicted: int = -1
    meta: dict = field(default_factory=dict)

    @property
    def final_omega(self):
        return self.omega_trace[-1]


def objective_from_scores(ext, y_index):
    """``ext[y] - max_{j not in {0, y}} ext[j]`` for extended score rows.

    ``y_index`` uses extended indexing (class ``t`` lives at ``t + 1``).
    """
    ext = np.atleast_2d(np.asarray(ext, dtype=np.float64))
    y_index = np.broadcast_to(np.asarray(y_index), (len(ext),))
    if ext.shape[1] < 3:
        raise ValueError("no competing class: need at least two classes")
    rows = np.arange(len(ext))
    masked = ext.copy()
    masked[:, REJECT] = -np.inf
    masked[rows, y_index] = -np.inf
    j_star = np.argmax(masked, axis=1)
    val = ext[rows, y_index] - ext[rows, j_star]
    return val, j_star


def attack_objective(model, x, label):
    """Objective for one input or a batch; ``label`` is the 0-based true class."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    val, _ = objective_from_scores(model.extended_scores(np.atleast_2d(x)), np.asarray(label) + 1)
    return float(val[0]) if single else val


def objective_gradient(model, x, label, surrogate: SurrogateSpec = SurrogateSpec()):
    """Gradient of the objective, computed on the gamma-scaled surrogate at ``x``.

    The best competitor is recomputed from the surrogate's scores on each call.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    y_index = np.broadcast_to(np.asarray(label) + 1, (len(X),))
    grad_model = model.with_gamma_scale(surrogate.gamma_scale)
    if hasattr(grad_model, "extended_scores_and_vjp"):
        ext, vjp = grad_model.extended_scores_and_vjp(X)
    else:
        ext = grad_model.extended_scores(X)
        vjp = lambda U: grad_model.extended_vjp(X, U)  # noqa: E731
    _, j_star = objective_from_scores(ext, y_index)
    U = np.zeros_like(ext)
    rows = np.arange(len(X))
    U[rows, y_index] = 1.0
    U[rows, j_star] -= 1.0
    g = vjp(U)
    return g[0] if single else g


def project(x, x0, epsilon, norm=Norm.L2, box=(0.0, 1.0)):
    """Project onto the ``epsilon`` ball around ``x0`` intersected with ``box``.

    Works row-wise on batches (any leading shape; ``x0`` broadcasts against
    ``x``).  Ball first, then box, applied twice.
    """
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    X0 = np.atleast_2d(x0)
    norm = Norm(norm)
    D = X - X0  # displacement from the origin, updated in place
    for rnd in range(2):
        if norm is Norm.L2:
            n = np.sqrt(np.einsum("...j,...j->...", D, D))
            if np.any(n > epsilon):
                scale = np.ones_like(n)
                np.divide(epsilon, n, out=scale, where=n > epsilon)
                D *= scale[..., None]
        else:
            np.clip(D, -epsilon, epsilon, out=D)
        if box is not None:
            D += X0
            np.clip(D, box[0], box[1], out=D)
            if rnd == 0:
                D -= X0
    X = D if box is not None else D + X0
    return X[0] if single else X


def pgd_batch(model, X0, labels, cfg: AttackConfig, surrogate: SurrogateSpec = SurrogateSpec(),
              grad_model=None, eval_model=None):
    """Run the line-search PGD on every row of ``X0``.

    ``grad_model`` supplies gradients and objective values for the step search
    (the model under attack by default; a different network in the transfer
    setting), ``eval_model`` decides success (defaults to ``model``).
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    attacked = model if grad_model is None else grad_model
    judge = model if eval_model is None else eval_model
    n = len(X0)
    y_index = labels + 1
    X = X0.copy()
    omega_cur, _ = objective_from_scores(attacked.extended_scores(X), y_index)
    traces = [[float(v)] for v in omega_cur]
    iters = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    if cfg.epsilon == 0:
        active[:] = False
        converged[:] = True
    etas = cfg.eta0 * 2.0 ** np.arange(cfg.doublings)
    K = len(etas)
    for _ in range(cfg.max_outer_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Xa = X[idx]
        g = objective_gradient(attacked, Xa, labels[idx], surrogate)
        cand = Xa[None, :, :] - etas[:, None, None] * g[None, :, :]
        cand = project(cand, X0[idx], cfg.epsilon, cfg.norm, cfg.box)
        flat = cand.reshape(K * idx.size, -1)
        vals, _ = objective_from_scores(attacked.extended_scores(flat), np.tile(y_index[idx], K))
        vals = vals.reshape(K, idx.size)
        best = np.argmin(vals, axis=0)  # first minimiser: smallest step on ties
        best_val = vals[best, np.arange(idx.size)]
        prev = omega_cur[idx]
        improve = best_val < prev
        new_X = np.where(improve[:, None], cand[best, np.arange(idx.size)], Xa)
        new_val = np.where(improve, best_val, prev)
        X[idx] = new_X
        omega_cur[idx] = new_val
        iters[idx] += 1
        for t, i in enumerate(idx):
            traces[i].append(float(new_val[t]))
        done = np.abs(new_val - prev) <= cfg.conv_tol
        converged[idx[done]] = True
        active[idx[done]] = False
    ext = judge.extended_scores(X)
    pred = decide(ext)
    final_omega, _ = objective_from_scores(ext, y_index)
    results = []
    for i in range(n):
        rejected = bool(pred[i] == REJECT)
        success = bool(pred[i] != y_index[i] and not rejected)
        results.append(AttackResult(
            x_star=X[i].copy(),
            omega_trace=traces[i],
            success=success,
            iterations=int(iters[i]),
            converged=bool(converged[i]),
            rejected=rejected,
            predicted=int(pred[i]),
            meta={"final_omega_target": float(final_omega[i])},
        ))
    return results


def pgd_line_search(model, x0, label, cfg: AttackConfig, surrogate: SurrogateSpec = SurrogateSpec()) -> AttackResult:
    """Attack a single input; see :func:`pgd_batch`."""
    return pgd_batch(model, np.atleast_2d(x0), np.atleast_1d(label), cfg, surrogate)[0]


def transfer_attack(target, surrogate_model, x0, label, cfg: AttackConfig):
    """Craft on an undefended surrogate network, judge on ``target``.

    ``x0``/``label`` may be a single sample or a batch; returns one result or a list.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    if not isinstance(surrogate_model, UndefendedClassifier):
        surrogate_model = UndefendedClassifier(surrogate_model, "surrogate")
    res = pgd_batch(target, np.atleast_2d(x0), np.atleast_1d(label), cfg,
                    grad_model=surrogate_model, eval_model=target)
    return res[0] if single else res


ATTACK_LOG_COLUMNS = ["sample_id", "epsilon", "iterations", "final_omega", "success", "rejected"]


def write_attack_log(path, records):
    """CSV with one row per attacked sample."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTACK_LOG_COLUMNS)
        for r in records:
            w.writerow([r["sample_id"], repr(float(r["epsilon"])), int(r["iterations"]),
                        repr(float(r["final_omega"])), int(bool(r["success"])), int(bool(r["rejected"]))])
