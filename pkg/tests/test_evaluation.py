import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rejectkit.attack import AttackConfig
from rejectkit.defense import REJECT, UndefendedClassifier
from rejectkit.evaluation import (
    BENCH_COLUMNS,
    CURVE_COLUMNS,
    Setting,
    accuracy_under_attack,
    benchmark_prototypes,
    evaluate_curve,
    far_grid,
    read_curves_csv,
    reduction_ratio,
    time_per_call,
    write_benchmark_csv,
    write_curves_csv,
)

preds = st.lists(st.integers(0, 3), min_size=1, max_size=50)


@settings(max_examples=100)
@given(preds, st.integers(0, 10_000))
def test_accuracy_identity(pred, seed):
    pred = np.array(pred)
    y = np.random.default_rng(seed).integers(0, 3, len(pred))
    correct = (pred == y + 1).mean()
    rejected = (pred == REJECT).mean()
    assert accuracy_under_attack(pred, y, 0.0) == pytest.approx(correct)
    assert accuracy_under_attack(pred, y, 0.5) == pytest.approx(correct + rejected)


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy_under_attack([1, 2], [0], 0.0)
    assert np.isnan(accuracy_under_attack([], [], 0.0))


@pytest.fixture(scope="module")
def curves(request):
    dc = request.getfixturevalue("toy_nr_rbf")
    bb = request.getfixturevalue("toy_backbone")
    blobs = request.getfixturevalue("blobs")
    grid = [0.0, 0.2, 0.6]
    cfg = AttackConfig(epsilon=0.0, max_outer_iters=60)
    wb = evaluate_curve(dc, blobs.X, blobs.y, grid, runs=3, seed=1, samples_per_run=30, attack=cfg)
    und = evaluate_curve(UndefendedClassifier(bb), blobs.X, blobs.y, grid, runs=3, seed=1,
                         samples_per_run=30, attack=cfg)
    cache = {}
    bbx = evaluate_curve(dc, blobs.X, blobs.y, grid, Setting.BLACK_BOX, runs=3, seed=1, samples_per_run=30,
                         attack=cfg, surrogate_model=bb, craft_cache=cache)
    return wb, und, bbx, cache


def test_curve_shapes_and_identity(curves):
    wb, und, bbx, _ = curves
    for c in (wb, und, bbx):
        assert c.per_run_accuracy.shape == (3, 3)
        np.testing.assert_allclose(c.accuracy_mean, c.per_run_accuracy.mean(0))
        # correct-or-rejected under attack, correct only when clean
        counts = lambda a: np.rint(a * 30).astype(int)  # noqa: E731
        np.testing.assert_array_equal(counts(c.per_run_accuracy[:, 1:]),
                                      counts(c.per_run_true_class[:, 1:]) + counts(c.per_run_rejection[:, 1:]))
        np.testing.assert_array_equal(c.per_run_accuracy[:, 0], c.per_run_true_class[:, 0])
    assert np.all(und.rejection_mean == 0)
    assert und.accuracy_mean[-1] < und.accuracy_mean[0]


def test_records_unique_per_sample_and_budget(curves):
    wb, _, _, _ = curves
    keys = [(r["sample_id"], r["epsilon"]) for r in wb.records]
    assert len(keys) == len(set(keys))
    assert {r["epsilon"] for r in wb.records} == {0.0, 0.2, 0.6}


def test_black_box_cache_reused(curves, toy_nr_svm, toy_backbone, blobs):
    cache = curves[3]
    n = len(cache)
    assert n > 0
    evaluate_curve(toy_nr_svm, blobs.X, blobs.y, [0.0, 0.2, 0.6], Setting.BLACK_BOX, runs=3, seed=1,
                   samples_per_run=30, attack=AttackConfig(0.0, max_outer_iters=60),
                   surrogate_model=toy_backbone, craft_cache=cache)
    assert len(cache) == n


def test_curve_deterministic(toy_nr_rbf, blobs, curves):
    again = evaluate_curve(toy_nr_rbf, blobs.X, blobs.y, [0.0, 0.2, 0.6], runs=3, seed=1, samples_per_run=30,
                           attack=AttackConfig(0.0, max_outer_iters=60))
    np.testing.assert_array_equal(again.per_run_accuracy, curves[0].per_run_accuracy)


def test_curve_argument_checks(toy_nr_rbf, blobs):
    with pytest.raises(ValueError, match="grid"):
        evaluate_curve(toy_nr_rbf, blobs.X, blobs.y, [0.1, 0.2])
    with pytest.raises(ValueError, match="grid"):
        evaluate_curve(toy_nr_rbf, blobs.X, blobs.y, [0.0, 0.2, 0.2])
    with pytest.raises(ValueError, match="surrogate"):
        evaluate_curve(toy_nr_rbf, blobs.X, blobs.y, [0.0], Setting.BLACK_BOX)
    with pytest.raises(ValueError, match="runs"):
        evaluate_curve(toy_nr_rbf, blobs.X, blobs.y, [0.0], runs=0)


def test_curves_csv(curves, tmp_path):
    path = tmp_path / "c.csv"
    write_curves_csv(path, curves[:2])
    rows = read_curves_csv(path)
    assert list(rows[0]) == CURVE_COLUMNS
    assert len(rows) == 6
    assert float(rows[2]["accuracy_mean"]) == curves[0].accuracy_mean[2]


def test_benchmark(toy_nr_rbf, toy_nr_svm, blobs, tmp_path):
    rows = benchmark_prototypes({"NR": toy_nr_svm, "NR-RBF": toy_nr_rbf}, blobs.X, blobs.y,
                                {"NR-RBF": "NR"}, repeats=20)
    by = {r.detector: r for r in rows}
    assert by["NR-RBF"].total == 3
    assert by["NR-RBF"].reduction == pytest.approx(toy_nr_svm.layer_detectors[0].prototype_count / 3)
    assert by["NR"].reduction == 1.0
    assert by["NR"].latency_us_mean > 0
    assert by["NR-RBF"].clean_accuracy == accuracy_under_attack(toy_nr_rbf.predict(blobs.X), blobs.y, 0.0)
    path = tmp_path / "b.csv"
    write_benchmark_csv(path, rows)
    assert path.read_text().splitlines()[0].split(",") == BENCH_COLUMNS
    untimed = benchmark_prototypes({"NR": toy_nr_svm}, blobs.X, blobs.y, timing=False)
    assert np.isnan(untimed[0].latency_us_mean)


def test_reduction_and_timer():
    assert reduction_ratio(100, 4) == 25.0
    mean, std = time_per_call(lambda: None, repeats=50, warmup=1)
    assert mean >= 0 and std >= 0


def test_far_grid(centers):
    G = far_grid(centers, 0.08)
    d = np.sqrt(((G[:, None, :] - centers[None]) ** 2).sum(-1)).min(1)
    assert len(G) > 100
    assert d.min() >= 0.8
