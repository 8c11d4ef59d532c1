import numpy as np
import pytest

from rejectkit.backbone import TrainConfig, mlp_arch, train_backbone
from rejectkit.data import synth_blobs, triangle_centers
from rejectkit.defense import DefendedClassifier, assemble_defense, calibrate_threshold
from rejectkit.detectors import fit_rbf_net, fit_svm_rbf

SPREAD = 0.08


@pytest.fixture(scope="session")
def centers():
    return triangle_centers()


@pytest.fixture(scope="session")
def blobs(centers):
    return synth_blobs(centers, SPREAD, 100, seed=0, clip=(0.0, 1.0))


@pytest.fixture(scope="session")
def toy_backbone(blobs):
    arch = mlp_arch([2, 16, 16, 3], {1: "h1", 2: "h2"})
    return train_backbone(blobs.X, blobs.y, arch, TrainConfig(0.1, 0.9, 32, 50), seed=0)


@pytest.fixture(scope="session")
def toy_rbf(blobs):
    return fit_rbf_net(blobs.X, blobs.y, 3, seed=0)


@pytest.fixture(scope="session")
def toy_svm(blobs):
    return fit_svm_rbf(blobs.X, blobs.y, C=1.0, gamma=1.0)


def _calibrated(dc, X):
    dc.theta = calibrate_threshold(dc, X, 0.10)
    return dc


@pytest.fixture(scope="session")
def toy_nr_rbf(toy_backbone, toy_rbf, blobs):
    return _calibrated(DefendedClassifier(toy_backbone, ["input"], [toy_rbf], name="NR-RBF"), blobs.X)


@pytest.fixture(scope="session")
def toy_nr_svm(toy_backbone, toy_svm, blobs):
    return _calibrated(DefendedClassifier(toy_backbone, ["input"], [toy_svm], name="NR"), blobs.X)


@pytest.fixture(scope="session")
def toy_stacked(toy_backbone, blobs):
    """Two hidden taps with RBF detectors and an RBF combiner."""
    dc = assemble_defense(toy_backbone, ["h1", "h2"],
                          [{"kind": "rbfnet", "r": 6, "epochs": 60}] * 2,
                          {"kind": "rbfnet", "r": 3, "epochs": 60},
                          blobs.X, blobs.y, seed=0, name="stacked")
    return _calibrated(dc, blobs.X)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results: criterion -> list of (part, ok, detail); one summary line each
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        parts = CRITERIA[n]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{p[0]}: {p[2]}" if p[0] else p[2] for p in parts)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
