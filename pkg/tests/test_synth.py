import numpy as np
import pytest

from calib.binning import equal_width
from calib.dataset import predictions_csv
from calib.kernel import KernelSpec
from calib.metrics import ece, group_mce
from calib.synth import (InsufficientSupportError, SynthSpec, cluster_layout, confidence_profile,
                         generate, logit_shifted, true_slce)

K15 = equal_width(15)


def test_deterministic_bytes():
    a, ta = generate(SynthSpec(n=500, seed=3))
    b, tb = generate(SynthSpec(n=500, seed=3))
    assert predictions_csv(a) == predictions_csv(b)
    assert a.features.values.tobytes() == b.features.values.tobytes()
    assert ta.p_star.tobytes() == tb.p_star.tobytes()
    c, _ = generate(SynthSpec(n=500, seed=4))
    assert predictions_csv(a) != predictions_csv(c)


def test_shapes_and_labels():
    ds, t = generate(SynthSpec(n=300, d=4, c=5))
    assert ds.features.values.shape == (300, 4)
    assert set(ds.groups) <= {f"c{j}" for j in range(5)}
    assert np.all((ds.conf >= 0.05) & (ds.conf <= 0.95))
    assert np.all(ds.y_pred == 0)
    assert ds.groups == tuple(f"c{j}" for j in t.cluster)


def test_layout_checkerboard():
    means, signs = cluster_layout(4, 3)
    assert means.shape == (4, 3)
    assert list(signs) == [1, -1, -1, 1]
    assert signs.sum() == 0


def test_profile_range():
    r = np.linspace(0, 10, 50)
    p = confidence_profile(r, 3)
    assert np.all(np.diff(p) < 0) and p.max() < 0.7 and p.min() > 0.3


def test_unbiased_generator_is_calibrated():
    ds, t = generate(SynthSpec(n=20000, bias=0.0, seed=1))
    np.testing.assert_array_equal(ds.conf, t.p_star)
    assert ece(ds, K15) <= 0.03


def test_opposite_clusters_give_group_error():
    ds, t = generate(SynthSpec(n=20000, c=2, bias=0.2, seed=2))
    per, worst = group_mce(ds, K15)
    assert worst >= 0.15
    # per-bin bias cancels globally
    assert abs(np.mean(t.bias)) < 0.02


def test_invalid_spec():
    with pytest.raises(ValueError):
        SynthSpec(bias=0.5)
    with pytest.raises(ValueError):
        SynthSpec(n=0)


def test_logit_shifted_is_overconfident():
    ds, q = logit_shifted(SynthSpec(n=2000, seed=0))
    assert ds.probs.shape == (2000, 2)
    p1 = ds.probs[:, 1]
    assert np.all(np.abs(p1 - 0.5) >= np.abs(q - 0.5) - 1e-12)


def test_true_slce_zero_without_bias():
    spec = SynthSpec(bias=0.0)
    _, t = generate(SynthSpec(n=10, bias=0.0))
    v, se = true_slce(spec, 0.6, t.means[0], KernelSpec("laplacian", 0.1), K15, mc_samples=20000)
    assert abs(v) <= 3 * se + 1e-12


def test_true_slce_at_overconfident_centre():
    spec = SynthSpec(bias=0.2)
    means, signs = cluster_layout(spec.c, spec.d)
    j = int(np.flatnonzero(signs > 0)[0])
    conf = float(confidence_profile(np.array([0.0]), spec.d)[0])
    v, se = true_slce(spec, conf, means[j], KernelSpec("laplacian", 0.02), K15, mc_samples=200_000)
    assert abs(v - 0.2) <= max(3 * se, 5e-3)


def test_true_slce_wide_kernel_matches_bin_gap():
    spec = SynthSpec(bias=0.2)
    v, se = true_slce(spec, 0.5, np.zeros(3), KernelSpec("laplacian", 1e9), K15,
                      mc_samples=400_000, seed=5)
    # independent estimate of the population gap in the same bin
    ds, t = generate(SynthSpec(n=400_000, bias=0.2, seed=11))
    sel = K15.index(ds.conf) == K15.index(0.5)
    gap = ds.conf[sel] - t.p_star[sel]
    se2 = gap.std() / np.sqrt(sel.sum())
    assert abs(v - gap.mean()) <= 4 * np.hypot(se, se2)


def test_true_slce_errors():
    spec = SynthSpec()
    with pytest.raises(ValueError):
        true_slce(spec, 0.5, np.zeros(3), KernelSpec(), K15, mc_samples=100)
    with pytest.raises(InsufficientSupportError):
        true_slce(spec, 0.99, np.zeros(3), KernelSpec("laplacian", 0.1), K15, mc_samples=10_000)


def test_more_samples_keep_earlier_draws():
    small, ts = generate(SynthSpec(n=100, seed=8))
    big, tb = generate(SynthSpec(n=250, seed=8))
    np.testing.assert_array_equal(big.conf[:100], small.conf)
    np.testing.assert_array_equal(big.features.values[:100], small.features.values)
    np.testing.assert_array_equal(big.y_true[:100], small.y_true)
    np.testing.assert_array_equal(tb.cluster[:100], ts.cluster)
