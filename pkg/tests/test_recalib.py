import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calib.binning import equal_width
from calib.dataset import Dataset
from calib.kernel import KernelSpec
from calib.recalib import (CapabilityError, FormatVersionError, TsState, apply_groupwise, apply_hb,
                           apply_ir, apply_lore, apply_ts, apply_ts_logits, fit_groupwise, fit_hb,
                           fit_ir, fit_lore, fit_ts, fit_ts_logits, load_recalibrator, pav,
                           recalibrate_dataset, save_recalibrator)
from conftest import make_ds
from oracles import naive_lore

K2 = equal_width(2)
K15 = equal_width(15)
E = math.exp(-1)


def test_lore_hand_value(two_point):
    s = fit_lore(two_point, KernelSpec("laplacian", 1.0), K2)
    assert s.n == 2
    assert apply_lore(s, 0.7, [0.0]) == pytest.approx(1 / (1 + E), abs=1e-9)
    assert apply_lore(s, 0.7, [0.0]) == pytest.approx(0.731059, abs=1e-6)


def test_lore_bandwidth_limits(two_point):
    wide = fit_lore(two_point, KernelSpec("laplacian", 1e9), K2)
    assert apply_lore(wide, 0.7, [0.0]) == pytest.approx(0.5, abs=1e-9)
    assert apply_lore(wide, 0.7, [0.0]) == pytest.approx(apply_hb(fit_hb(two_point, K2), 0.7), abs=1e-9)
    narrow = fit_lore(two_point, KernelSpec("laplacian", 1e-9), K2)
    assert apply_lore(narrow, 0.7, [0.8]) == 0.0
    assert apply_lore(narrow, 0.7, [0.2]) == 1.0


def test_lore_empty_bin_falls_back_and_flags(two_point):
    s = fit_lore(two_point, KernelSpec("laplacian", 1.0), K2)
    val, flag = apply_lore(s, 0.2, [0.0], return_flags=True)
    assert flag and val == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fit_lore(make_ds([], [], feats=np.zeros((0, 1))), KernelSpec(), K2)


def test_lore_matches_naive_loop():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 51))
        d = int(rng.integers(1, 4))
        confs, feats = rng.random(n), rng.random((n, d))
        correct = rng.random(n) < confs
        gamma = float(10 ** rng.uniform(-1, 1))
        s = fit_lore(make_ds(confs, correct, feats=feats), KernelSpec("laplacian", gamma), K15)
        qc, qx = rng.random(10), rng.random((10, d))
        got, flags = apply_lore(s, qc, qx, return_flags=True)
        for i in range(10):
            want = naive_lore(list(confs), [float(a) for a in correct], feats.tolist(),
                              qc[i], qx[i].tolist(), gamma, list(K15.edges))
            if want is None:
                assert flags[i]
            else:
                assert not flags[i] and abs(got[i] - want) <= 1e-12


def test_lore_group_kernel_equals_groupwise_hb():
    rng = np.random.default_rng(1)
    n = 400
    confs = rng.random(n)
    groups = [f"g{i}" for i in rng.integers(0, 3, n)]
    ds = make_ds(confs, rng.random(n) < confs, groups=groups)
    lore = fit_lore(ds, KernelSpec("group"), K15)
    ghb = fit_groupwise("hb", ds, K15)
    q = rng.random(50)
    qg = [f"g{i}" for i in rng.integers(0, 3, 50)]
    a, fa = apply_lore(lore, q, groups=qg, return_flags=True)
    b, fb = apply_groupwise(ghb, q, qg, return_flags=True)
    keep = ~fa
    np.testing.assert_allclose(a[keep], b[keep], atol=1e-12)


def test_lore_pca_state(two_point):
    rng = np.random.default_rng(0)
    ds = make_ds(rng.random(100), rng.random(100) < 0.5, feats=rng.random((100, 6)))
    s = fit_lore(ds, KernelSpec("laplacian", 0.4), K15, pca_dim=3)
    assert s.features.shape == (100, 3) and s.kernel.d == 3
    out = apply_lore(s, ds.conf, ds.features)
    assert out.shape == (100,) and np.all((out >= 0) & (out <= 1))


def test_hb():
    ds = make_ds([0.6, 0.7, 0.8, 0.9], [1, 0, 1, 1])
    s = fit_hb(ds, K2)
    assert apply_hb(s, 0.55) == 0.75 and apply_hb(s, 1.0) == 0.75
    val, flag = apply_hb(s, 0.1, return_flags=True)
    assert flag and val == 0.75
    assert apply_hb(fit_hb(make_ds([0.9, 0.95], [1, 1]), K2), 0.7) == 1.0


def test_ts_softmax_by_hand():
    p = apply_ts_logits(TsState(2.0), [[2.0, 0.0]])[0]
    np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
    assert p[0] == pytest.approx(0.731059, abs=1e-6)
    assert p[1] == pytest.approx(0.268941, abs=1e-6)


def test_ts_identity_and_limit():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    np.testing.assert_allclose(apply_ts(TsState(1.0), probs), probs, atol=1e-12)
    np.testing.assert_allclose(apply_ts(TsState(1e6), probs), 1 / 3, atol=1e-5)


def test_ts_fit_recovers_temperature():
    rng = np.random.default_rng(0)
    z = rng.normal(scale=3.0, size=(5000, 3))
    true = np.exp(z / 2.0)
    true /= true.sum(axis=1, keepdims=True)
    y = np.array([rng.choice(3, p=row) for row in true])
    t = fit_ts_logits(z, y).temperature
    assert abs(t - 2.0) < 0.2


def test_ts_needs_probs_and_keeps_argmax():
    with pytest.raises(CapabilityError):
        fit_ts(make_ds([0.6], [1]))
    rng = np.random.default_rng(3)
    z = rng.normal(size=(200, 4)) * 4
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    pred = probs.argmax(axis=1)
    y = np.where(rng.random(200) < 0.6, pred, rng.integers(0, 4, 200))
    ds = Dataset(ids=tuple(f"i{i}" for i in range(200)), y_true=y, y_pred=pred,
                 conf=probs.max(axis=1), m=4, probs=probs)
    s = fit_ts(ds)
    out, _ = recalibrate_dataset(s, ds)
    assert np.array_equal(out.y_pred, ds.y_pred)
    np.testing.assert_allclose(out.conf, out.probs.max(axis=1))
    same, _ = recalibrate_dataset(TsState(1.0), ds)
    np.testing.assert_allclose(same.probs, ds.probs, atol=1e-12)


def test_pav_by_hand():
    s = fit_ir(make_ds([0.2, 0.5, 0.9], [1, 0, 1]))
    np.testing.assert_allclose(s.v, [0.5, 0.5, 1.0], atol=1e-12)
    np.testing.assert_array_equal(fit_ir(make_ds([0.2, 0.5, 0.9], [0, 1, 1])).v, [0, 1, 1])
    assert apply_ir(s, 0.05) == 0.5
    assert apply_ir(s, 0.99) == 1.0


def test_ir_pools_tied_confidences():
    s = fit_ir(make_ds([0.5, 0.5, 0.5, 0.8], [1, 0, 0, 1]))
    np.testing.assert_allclose(s.x, [0.5, 0.8])
    np.testing.assert_allclose(s.v, [1 / 3, 1.0])


@settings(max_examples=60)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_pav_is_monotone_and_mass_preserving(y):
    f = pav(y)
    assert np.all(np.diff(f) >= -1e-12)
    assert f.sum() == pytest.approx(sum(y), abs=1e-9)


def test_groupwise_hb():
    ds = make_ds([0.7, 0.7, 0.8, 0.8], [1, 1, 0, 0], groups=["A", "A", "B", "B"])
    s = fit_groupwise("hb", ds, K2)
    out, flags = apply_groupwise(s, [0.75, 0.75, 0.75], ["A", "B", "Z"], return_flags=True)
    np.testing.assert_allclose(out, [1.0, 0.0, 0.5])
    assert list(flags) == [False, False, True]
    one = make_ds([0.7, 0.8, 0.2], [1, 0, 1], groups=["A"] * 3)
    np.testing.assert_allclose(apply_groupwise(fit_groupwise("hb", one, K2), one.conf, one.groups),
                               apply_hb(fit_hb(one, K2), one.conf))
    with pytest.raises(ValueError):
        fit_groupwise("ir", ds, K2)


def _roundtrip(state, tmp_path):
    p = tmp_path / "state.json"
    save_recalibrator(state, p)
    return load_recalibrator(p)


def test_persistence_roundtrips(tmp_path):
    t = _roundtrip(TsState(1.3), tmp_path)
    assert abs(t.temperature - 1.3) <= 1e-12
    rng = np.random.default_rng(0)
    c = rng.random(300)
    ds = make_ds(c, rng.random(300) < c, feats=rng.random((300, 2)),
                 groups=[f"g{i % 3}" for i in range(300)])
    hb = fit_hb(ds, K15)
    hb2 = _roundtrip(hb, tmp_path)
    assert hb.acc.tobytes() == hb2.acc.tobytes()
    lore = fit_lore(ds.subset(np.arange(100)), KernelSpec("laplacian", 0.2), K15)
    lore2 = _roundtrip(lore, tmp_path)
    assert lore2.n == 100
    q = rng.random(20)
    qx = rng.random((20, 2))
    assert apply_lore(lore, q, qx).tobytes() == apply_lore(lore2, q, qx).tobytes()
    ir = fit_ir(ds)
    assert apply_ir(_roundtrip(ir, tmp_path), q).tobytes() == apply_ir(ir, q).tobytes()
    g = fit_groupwise("hb", ds, K15)
    assert apply_groupwise(_roundtrip(g, tmp_path), q, ["g0"] * 20).tobytes() == \
        apply_groupwise(g, q, ["g0"] * 20).tobytes()


def test_unknown_tag_or_version(tmp_path):
    p = tmp_path / "s.json"
    save_recalibrator(TsState(1.0), p)
    doc = json.loads(p.read_text())
    doc["method"] = "magic"
    p.write_text(json.dumps(doc))
    with pytest.raises(FormatVersionError):
        load_recalibrator(p)
    doc["method"], doc["version"] = "ts", 99
    p.write_text(json.dumps(doc))
    with pytest.raises(FormatVersionError):
        load_recalibrator(p)
