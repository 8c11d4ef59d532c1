"""Security-evaluation curves and prototype/latency benchmarks."""

from __future__ import annotations

import csv
import enum
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig, SurrogateSpec, objective_from_scores, pgd_batch
from .defense import REJECT, UndefendedClassifier, decide
from .mathutils import SeedStreams, pairwise_sq_dists


class Setting(str, enum.Enum):
    WHITE_BOX = "white_box"
    BLACK_BOX = "black_box"


def accuracy_under_attack(predicted, labels, epsilon) -> float:
    """Fraction correct; under attack (``epsilon > 0``) a rejection also counts as correct.

    ``predicted`` uses extended indexing (0 = reject, class ``t`` at ``t + 1``).
    """
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if len(predicted) != len(labels):
        raise ValueError("decisions and labels are not aligned")
    if len(predicted) == 0:
        return float("nan")
    ok = predicted == labels + 1
    if epsilon > 0:
        ok |= predicted == REJECT
    return float(ok.mean())


@dataclass
class SecurityCurve:
    epsilons: np.ndarray
    accuracy_mean: np.ndarray
    accuracy_std: np.ndarray
    rejection_mean: np.ndarray
    runs: int
    setting: Setting
    detector: str = ""
    per_run_accuracy: np.ndarray = None
    per_run_rejection: np.ndarray = None
    per_run_true_class: np.ndarray = None
    non_converged: int = 0
    records: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.setting = Setting(self.setting)


def _check_grid(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or grid[0] != 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("epsilon grid must start at 0 and be strictly increasing")
    return grid


ATTACK_CHUNK = 256


def _chunked(fn, X, y):
    """Apply a batch attack in fixed-size chunks to bound memory."""
    out = []
    for s in range(0, len(X), ATTACK_CHUNK):
        out.extend(fn(X[s:s + ATTACK_CHUNK], y[s:s + ATTACK_CHUNK]))
    return out


def evaluate_curve(model, X_test, y_test, grid, setting=Setting.WHITE_BOX, runs=5, seed=0,
                   samples_per_run=200, attack=None, surrogate=SurrogateSpec(),
                   surrogate_model=None, name=None, craft_cache=None):
    """Accuracy and rejection rate per perturbation budget, averaged over runs.

    ``attack`` is an :class:`AttackConfig` template whose ``epsilon`` is
    overridden per grid point.  The black-box setting crafts on
    ``surrogate_model`` (an undefended network) and judges on ``model``.

    Attacks are deterministic, so a sample drawn by several runs is attacked
    once per budget; ``records`` holds one entry per attacked sample and
    budget, and ``non_converged`` counts those entries.  In the black-box setting ``craft_cache`` (a dict) can be
    shared between calls with the same surrogate, test set and attack template
    to reuse the crafted points across target models.
    """
    setting = Setting(setting)
    grid = _check_grid(grid)
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if setting is Setting.BLACK_BOX and surrogate_model is None:
        raise ValueError("black-box evaluation needs a surrogate model")
    if setting is Setting.BLACK_BOX and not isinstance(surrogate_model, UndefendedClassifier):
        surrogate_model = UndefendedClassifier(surrogate_model, "surrogate")
    attack = attack or AttackConfig(epsilon=0.0)
    X_test = np.asarray(X_test, dtype=np.float64)
    y_test = np.asarray(y_test, dtype=np.int64)
    streams = SeedStreams(seed)
    m = min(samples_per_run, len(X_test))
    draws = [np.sort(streams.get(f"run{r}").choice(len(X_test), size=m, replace=False)) for r in range(runs)]
    crafted = craft_cache if craft_cache is not None else {}
    acc = np.zeros((runs, len(grid)))
    rej = np.zeros((runs, len(grid)))
    true_cls = np.zeros((runs, len(grid)))
    non_conv = 0
    records = []
    for e, eps in enumerate(grid):
        # outcome per test index: (pred, iterations, final omega, success, converged)
        outcome = {}
        todo = np.unique(np.concatenate(draws))
        X, y = X_test[todo], y_test[todo]
        if eps == 0:
            ext = model.extended_scores(X)
            pred = decide(ext)
            final = objective_from_scores(ext, y + 1)[0]
            for k, i in enumerate(todo):
                outcome[i] = (pred[k], 0, final[k], pred[k] != y[k] + 1 and pred[k] != REJECT, True)
        else:
            cfg = replace(attack, epsilon=float(eps))
            if setting is Setting.WHITE_BOX:
                res = _chunked(lambda a, b: pgd_batch(model, a, b, cfg, surrogate), X, y)
                for k, i in enumerate(todo):
                    rr = res[k]
                    outcome[i] = (rr.predicted, rr.iterations, rr.meta["final_omega_target"],
                                  rr.success, rr.converged)
            else:
                missing = [i for i in todo if (int(i), float(eps)) not in crafted]
                if missing:
                    res = _chunked(lambda a, b: pgd_batch(surrogate_model, a, b, cfg), X_test[missing], y_test[missing])
                    for i, rr in zip(missing, res):
                        crafted[(int(i), float(eps))] = (rr.x_star, rr.iterations, rr.converged)
                Xs = np.array([crafted[(int(i), float(eps))][0] for i in todo])
                ext = model.extended_scores(Xs)
                pred = decide(ext)
                final = objective_from_scores(ext, y + 1)[0]
                for k, i in enumerate(todo):
                    _, it, conv = crafted[(int(i), float(eps))]
                    outcome[i] = (pred[k], it, final[k], pred[k] != y[k] + 1 and pred[k] != REJECT, conv)
        for r, idx in enumerate(draws):
            pred = np.array([outcome[i][0] for i in idx])
            y = y_test[idx]
            acc[r, e] = accuracy_under_attack(pred, y, eps)
            rej[r, e] = float((pred == REJECT).mean())
            true_cls[r, e] = float((pred == y + 1).mean())
        for i in todo:
            p, it, fo, succ, conv = outcome[i]
            non_conv += not conv
            records.append({
                "sample_id": int(i), "epsilon": float(eps), "iterations": int(it),
                "final_omega": float(fo), "success": bool(succ), "rejected": bool(p == REJECT),
            })
    return SecurityCurve(
        epsilons=grid,
        accuracy_mean=acc.mean(0),
        accuracy_std=acc.std(0),
        rejection_mean=rej.mean(0),
        runs=runs,
        setting=setting,
        detector=name or getattr(model, "name", ""),
        per_run_accuracy=acc,
        per_run_rejection=rej,
        per_run_true_class=true_cls,
        non_converged=int(non_conv),
        records=records,
    )


CURVE_COLUMNS = ["setting", "detector", "epsilon", "accuracy_mean", "accuracy_std", "rejection_mean"]
BENCH_COLUMNS = ["detector", "component", "prototypes", "total", "reduction",
                 "latency_us_mean", "latency_us_std", "clean_accuracy"]


def _f(x):
    return repr(float(x))


def write_curves_csv(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for c in curves:
            for e in range(len(c.epsilons)):
                w.writerow([c.setting.value, c.detector, _f(c.epsilons[e]), _f(c.accuracy_mean[e]),
                            _f(c.accuracy_std[e]), _f(c.rejection_mean[e])])


def read_curves_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# benchmarks


def time_per_call(fn, repeats=1000, groups=10, warmup=50):
    """Median of group means and overall std of single-call wall-clock times (seconds)."""
    for _ in range(warmup):
        fn()
    times = np.empty(repeats)
    clock = time.perf_counter
    for i in range(repeats):
        t0 = clock()
        fn()
        times[i] = clock() - t0
    means = [g.mean() for g in np.array_split(times, groups)]
    return float(np.median(means)), float(times.std())


@dataclass
class BenchmarkRow:
    detector: str
    component: str
    prototypes: int
    total: int
    reduction: float
    latency_us_mean: float
    latency_us_std: float
    clean_accuracy: float


def reduction_ratio(reference_total, candidate_total):
    return float(reference_total) / float(candidate_total)


def benchmark_prototypes(defenses, X_test, y_test, reference=None, repeats=1000, timing=True):
    """Prototype totals, reduction ratios, warm latency and clean accuracy.

    ``defenses`` maps name -> defended classifier; ``reference`` maps a
    candidate name to the name of the defence it is compared against.
    Latency covers layer detectors and combiner for one sample with the
    backbone activations precomputed, timed single-threaded.
    """
    reference = reference or {}
    totals = {name: sum(dc.prototype_totals().values()) for name, dc in defenses.items()}
    rows = []
    for name, dc in defenses.items():
        pred = dc.predict(X_test)
        clean = accuracy_under_attack(pred, y_test, 0.0)
        if timing:
            mean_s, std_s = time_per_call(dc.detector_latency_fn(X_test[0]), repeats)
        else:
            mean_s = std_s = float("nan")
        ref = reference.get(name)
        red = reduction_ratio(totals[ref], totals[name]) if ref else 1.0
        for comp, count in dc.prototype_totals().items():
            rows.append(BenchmarkRow(name, comp, count, totals[name], red,
                                     mean_s * 1e6, std_s * 1e6, clean))
    return rows


def write_benchmark_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r.detector, r.component, r.prototypes, r.total, _f(r.reduction),
                        f"{r.latency_us_mean:.3f}", f"{r.latency_us_std:.3f}", _f(r.clean_accuracy)])


def latency_scaling(dim=10, counts=(10, 100, 1000), repeats=1000, seed=0, n_classes=10):
    """Warm per-sample latency of RBF-net scoring against prototype count.

    Returns ``(counts, latencies_us, slope, intercept, r2)`` for an affine fit.
    """
    from .detectors import RBFNetModel

    rng = SeedStreams(seed).get("latency")
    z = rng.standard_normal((1, dim))
    lat = []
    for r in counts:
        model = RBFNetModel(rng.standard_normal((r, dim)), np.ones(r),
                            rng.standard_normal((n_classes, r)), np.zeros(n_classes))
        mean_s, _ = time_per_call(lambda: model.scores(z), repeats)
        lat.append(mean_s * 1e6)
    counts = np.asarray(counts, dtype=np.float64)
    lat = np.asarray(lat)
    slope, intercept = np.polyfit(counts, lat, 1)
    fit = slope * counts + intercept
    ss_res = ((lat - fit) ** 2).sum()
    ss_tot = ((lat - lat.mean()) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return counts, lat, float(slope), float(intercept), float(r2)


def far_grid(centers, spread, lo=-1.5, hi=2.5, steps=81, min_sigmas=10.0):
    """Grid points at least ``min_sigmas * spread`` away from every centre."""
    ax = np.linspace(lo, hi, steps)
    G = np.array(np.meshgrid(ax, ax)).reshape(2, -1).T
    d = np.sqrt(pairwise_sq_dists(G, centers)).min(1)
    return G[d >= min_sigmas * spread]
