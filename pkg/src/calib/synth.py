"""Synthetic prediction logs with known, spatially clustered miscalibration.

Features come from ``c`` Gaussian clusters centred on a unit grid. Every
cluster shares the same confidence profile (a logistic function of the
distance to its centre), and each cluster is shifted by a constant bias of
``+b`` or ``-b`` in a checkerboard pattern, so neighbouring clusters are
over- and underconfident and the biases cancel within each confidence bin.
The true correctness probability is ``p* = confidence profile - bias``.

Correctness is encoded classifier-free: ``y_pred`` is always 0 and
``y_true`` is 0 exactly when the prediction is correct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .binning import BinningScheme
from .dataset import Dataset, FeatureMatrix
from .kernel import GROUP, KernelSpec

CONF_LO, CONF_HI = 0.3, 0.7
CLIP_LO, CLIP_HI = 0.05, 0.95
STREAM_CLUSTER, STREAM_FEATURES, STREAM_LABELS, STREAM_MC = 0, 1, 2, 3
MC_CHUNK = 1 << 17


class InsufficientSupportError(ValueError):
    """No Monte Carlo draw landed in the query's confidence bin."""


@dataclass(frozen=True)
class SynthSpec:
    n: int = 2000
    d: int = 3
    c: int = 4
    seed: int = 0
    bias: float = 0.2          # amplitude b
    scale: float = 0.1         # length scale; cluster spread is 0.15 * scale

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.c < 1:
            raise ValueError("n, d and c must be positive")
        if not 0.0 <= self.bias <= 0.3:
            raise ValueError("bias amplitude must lie in [0, 0.3]")
        if not self.scale > 0:
            raise ValueError("length scale must be positive")

    @property
    def sigma(self) -> float:
        return 0.15 * self.scale


@dataclass(frozen=True, eq=False)
class SynthTruth:
    spec: SynthSpec
    cluster: np.ndarray
    p_star: np.ndarray
    bias: np.ndarray
    means: np.ndarray = field(repr=False)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


def cluster_layout(c: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid positions (spacing 1) of the ``c`` cluster centres and their bias signs."""
    side = 1
    while side ** d < c:
        side += 1
    means = np.zeros((c, d))
    for j in range(c):
        k = j
        for axis in range(d):
            means[j, axis] = k % side
            k //= side
    signs = np.where(means.sum(axis=1) % 2 == 0, 1.0, -1.0)
    return means, signs


def confidence_profile(radius: np.ndarray, d: int) -> np.ndarray:
    """Shared confidence as a function of distance/sigma from the cluster centre."""
    return CONF_LO + (CONF_HI - CONF_LO) / (1.0 + np.exp(2.0 * (radius - math.sqrt(d))))


def _draw(spec: SynthSpec, n: int, rng_cluster, rng_feat, means, signs):
    cl = rng_cluster.integers(0, spec.c, size=n)
    x = means[cl] + spec.sigma * rng_feat.standard_normal((n, spec.d))
    radius = np.linalg.norm(x - means[cl], axis=1) / spec.sigma
    bias = spec.bias * signs[cl]
    p_star = np.clip(confidence_profile(radius, spec.d) - bias, 0.0, 1.0)
    conf = np.clip(p_star + bias, CLIP_LO, CLIP_HI)
    return cl, x, p_star, bias, conf


def generate(spec: SynthSpec) -> tuple[Dataset, SynthTruth]:
    means, signs = cluster_layout(spec.c, spec.d)
    cl, x, p_star, bias, conf = _draw(spec, spec.n, _rng(spec.seed, STREAM_CLUSTER),
                                      _rng(spec.seed, STREAM_FEATURES), means, signs)
    correct = _rng(spec.seed, STREAM_LABELS).random(spec.n) < p_star
    ds = Dataset(
        ids=tuple(f"s{i}" for i in range(spec.n)),
        y_true=np.where(correct, 0, 1),
        y_pred=np.zeros(spec.n, dtype=np.int64),
        conf=conf,
        m=2,
        groups=tuple(f"c{j}" for j in cl),
        features=FeatureMatrix(x),
    )
    return ds, SynthTruth(spec=spec, cluster=cl, p_star=p_star, bias=bias, means=means)


def logit_shifted(spec: SynthSpec, logit_scale: float = 3.0) -> tuple[Dataset, np.ndarray]:
    """Binary-classifier view of an unbiased generator with sharpened logits.

    The positive-class probability is the generator's ``p*``; labels are
    drawn from it, and the reported probabilities use logits multiplied by
    ``logit_scale`` (an overconfident model when > 1). Returns the dataset
    (with full probability vectors) and the true positive-class probability.
    """
    unbiased = SynthSpec(n=spec.n, d=spec.d, c=spec.c, seed=spec.seed, bias=0.0, scale=spec.scale)
    base, truth = generate(unbiased)
    q = np.clip(truth.p_star, 1e-6, 1 - 1e-6)
    y = (_rng(spec.seed, STREAM_LABELS).random(spec.n) < q).astype(np.int64)
    z1 = logit_scale * np.log(q / (1.0 - q))
    p1 = 1.0 / (1.0 + np.exp(-z1))
    probs = np.column_stack([1.0 - p1, p1])
    pred = np.argmax(probs, axis=1)
    ds = Dataset(ids=base.ids, y_true=y, y_pred=pred, conf=probs.max(axis=1), m=2,
                 probs=probs, groups=base.groups, features=base.features)
    return ds, q


def true_slce(spec: SynthSpec, conf, feats, kernel: KernelSpec, scheme: BinningScheme,
              mc_samples: int = 1_000_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Population SLCE at query points, by Monte Carlo over fresh generator draws.

    The correctness indicator is replaced by its conditional mean ``p*``,
    which leaves the expectation unchanged and lowers the variance. Returns
    ``(value, standard_error)`` per query (floats for a single query).
    """
    if mc_samples < 10_000:
        raise ValueError("use at least 10^4 Monte Carlo samples")
    if kernel.family == GROUP:
        raise ValueError("true SLCE is defined for feature-space kernels only")
    scalar = np.ndim(conf) == 0
    qc = np.atleast_1d(np.asarray(conf, dtype=float))
    qx = np.asarray(feats.values if isinstance(feats, FeatureMatrix) else feats, dtype=float)
    qx = qx.reshape(qc.size, spec.d)
    kernel = kernel.resolve(spec.d)
    qbin = scheme.index(qc)

    means, signs = cluster_layout(spec.c, spec.d)
    rc, rf = _rng(seed, STREAM_MC), _rng(seed, STREAM_MC + 1)
    nq = qc.size
    s_a = np.zeros(nq)
    s_b = np.zeros(nq)
    s_aa = np.zeros(nq)
    s_bb = np.zeros(nq)
    s_ab = np.zeros(nq)
    hits = np.zeros(nq, dtype=np.int64)
    done = 0
    while done < mc_samples:
        m = min(MC_CHUNK, mc_samples - done)
        _, x, p_star, _, c = _draw(spec, m, rc, rf, means, signs)
        xbin = scheme.index(c)
        gap = c - p_star
        for q in range(nq):
            sel = xbin == qbin[q]
            if not sel.any():
                continue
            diff = x[sel] - qx[q]
            if kernel.family == "laplacian":
                k = np.exp(-np.abs(diff).sum(axis=1) / (kernel.d * kernel.gamma))
            else:
                k = np.exp(-(diff ** 2).sum(axis=1) / (kernel.d * kernel.gamma ** 2))
            a = gap[sel] * k
            s_a[q] += a.sum()
            s_b[q] += k.sum()
            s_aa[q] += (a * a).sum()
            s_bb[q] += (k * k).sum()
            s_ab[q] += (a * k).sum()
            hits[q] += int(sel.sum())
        done += m
    if np.any(hits == 0) or np.any(s_b <= 0):
        raise InsufficientSupportError("no Monte Carlo draw fell in the query's confidence bin")
    n = float(mc_samples)
    mean_a, mean_b = s_a / n, s_b / n
    ratio = mean_a / mean_b
    # delta-method variance of a ratio estimator
    var_a = s_aa / n - mean_a ** 2
    var_b = s_bb / n - mean_b ** 2
    cov_ab = s_ab / n - mean_a * mean_b
    var_r = np.maximum(var_a - 2 * ratio * cov_ab + ratio ** 2 * var_b, 0.0) / (n * mean_b ** 2)
    se = np.sqrt(var_r)
    if scalar:
        return float(ratio[0]), float(se[0])
    return ratio, se
