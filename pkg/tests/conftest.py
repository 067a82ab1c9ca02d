import sys
import numpy as np
import pytest

from calib.dataset import Dataset, FeatureMatrix


def make_ds(confs, correct, feats=None, groups=None, probs=None):
    """Binary-encoded dataset: y_pred = 0, y_true = 0 iff correct."""
    confs = np.asarray(confs, dtype=float)
    correct = np.asarray(correct, dtype=bool)
    n = confs.size
    if feats is not None:
        feats = FeatureMatrix(np.asarray(feats, dtype=float).reshape(n, -1))
    return Dataset(
        ids=tuple(f"r{i}" for i in range(n)),
        y_true=np.where(correct, 0, 1),
        y_pred=np.zeros(n, dtype=np.int64),
        conf=confs,
        m=2,
        probs=probs,
        groups=tuple(groups) if groups is not None else None,
        features=feats,
    )


@pytest.fixture
def two_point():
    """The hand-computed 2-record example: d=1, confs 0.8/0.6, correct/wrong."""
    return make_ds([0.8, 0.6], [1, 0], feats=[[0.0], [1.0]])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        ok, detail = results[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
