"""Global, local and group-wise calibration metrics.

Local calibration error (LCE) at a record is the kernel-weighted average
confidence/accuracy gap over the records that share its confidence bin; the
record itself is part of the sum. MLCE is its maximum over the dataset.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .binning import BinningScheme
from .dataset import Dataset, FeatureMatrix
from .kernel import GROUP, KernelSpec, binned_kernel_sums

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class BinStats:
    counts: np.ndarray
    conf: np.ndarray   # mean confidence per bin, 0 where empty
    acc: np.ndarray    # mean accuracy per bin, 0 where empty

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.conf - self.acc)


def _bin_stats(conf: np.ndarray, correct: np.ndarray, scheme: BinningScheme) -> BinStats:
    k = scheme.n_bins
    if conf.size == 0:
        z = np.zeros(k)
        return BinStats(np.zeros(k, dtype=np.int64), z, z.copy())
    idx = scheme.index(conf)
    counts = np.bincount(idx, minlength=k)
    csum = np.bincount(idx, weights=conf, minlength=k)
    asum = np.bincount(idx, weights=correct, minlength=k)
    safe = np.maximum(counts, 1)
    return BinStats(counts, np.where(counts > 0, csum / safe, 0.0), np.where(counts > 0, asum / safe, 0.0))


def bin_stats(d: Dataset, scheme: BinningScheme) -> BinStats:
    return _bin_stats(d.conf, d.correct, scheme)


def _ece(stats: BinStats) -> float:
    n = stats.n
    if n == 0:
        raise ValueError("ECE of an empty dataset is undefined")
    nz = stats.counts > 0
    return float(np.sum(stats.counts[nz] / n * stats.gaps[nz]))


def _mce(stats: BinStats) -> float:
    if stats.n == 0:
        raise ValueError("MCE of an empty dataset is undefined")
    return float(stats.gaps[stats.counts > 0].max())


def ece(d: Dataset, scheme: BinningScheme) -> float:
    """Expected calibration error; empty bins are skipped."""
    return _ece(bin_stats(d, scheme))


def mce(d: Dataset, scheme: BinningScheme) -> float:
    return _mce(bin_stats(d, scheme))


def _true_class_prob(d: Dataset) -> tuple[np.ndarray, int]:
    p = d.probs[np.arange(d.n), d.y_true]
    clamped = int(np.sum(p < PROB_FLOOR))
    return np.maximum(p, PROB_FLOOR), clamped


def nll(d: Dataset, return_clamped: bool = False):
    """Mean negative log-likelihood of the true class.

    Without full probability vectors this is the binary log loss of the
    top-label confidence against correctness. Probabilities below 1e-12 are
    clamped; pass ``return_clamped=True`` to also get the clamp count.
    """
    if d.n == 0:
        raise ValueError("NLL of an empty dataset is undefined")
    if d.probs is not None:
        p, clamped = _true_class_prob(d)
        val = float(-np.mean(np.log(p)))
    else:
        a = d.correct
        p = np.where(a > 0, d.conf, 1.0 - d.conf)
        clamped = int(np.sum(p < PROB_FLOOR))
        val = float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))
    if clamped:
        log.warning("NLL: clamped %d probabilities to %g", clamped, PROB_FLOOR)
    return (val, clamped) if return_clamped else val


def brier(d: Dataset) -> float:
    if d.n == 0:
        raise ValueError("Brier score of an empty dataset is undefined")
    if d.probs is not None:
        onehot = np.zeros_like(d.probs)
        onehot[np.arange(d.n), d.y_true] = 1.0
        return float(np.mean(np.sum((d.probs - onehot) ** 2, axis=1)))
    return float(np.mean((d.conf - d.correct) ** 2))


# --------------------------------------------------------------------------
# Local calibration


@dataclass(frozen=True, eq=False)
class LceReport:
    values: np.ndarray  # per-record LCE in record order
    signed: np.ndarray  # per-record SLCE
    kernel: KernelSpec
    scheme: BinningScheme

    @property
    def gamma(self) -> float:
        return self.kernel.gamma

    @property
    def max(self) -> float:
        return float(self.values.max())

    @property
    def mean(self) -> float:
        return float(self.values.mean())


def _kernel_inputs(d: Dataset, spec: KernelSpec) -> tuple[KernelSpec, np.ndarray | None]:
    if spec.family == GROUP:
        return spec, None
    if d.features is None:
        raise ValueError("this kernel needs a feature matrix on the dataset")
    return spec.resolve(d.features.d), d.features.values


def slce_query(ref: Dataset, conf, feats, spec: KernelSpec, scheme: BinningScheme,
               groups=None, threads: int = 1) -> np.ndarray:
    """Signed local calibration error estimated from ``ref`` at arbitrary queries.

    ``conf`` is one confidence per query and ``feats`` the matching feature
    rows (or ``groups`` for the group-indicator kernel). Queries whose bin has
    no reference records come back as NaN.
    """
    conf = np.atleast_1d(np.asarray(conf, dtype=float))
    spec, xr = _kernel_inputs(ref, spec)
    xq = None
    if xr is not None:
        xq = np.asarray(feats.values if isinstance(feats, FeatureMatrix) else feats, dtype=float)
        xq = xq.reshape(conf.size, -1)
    num, den = binned_kernel_sums(
        spec, scheme.index(conf), scheme.index(ref.conf), ref.conf - ref.correct,
        query_feats=xq, ref_feats=xr, query_groups=groups, ref_groups=ref.groups,
        threads=threads)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def slce_all(d: Dataset, spec: KernelSpec, scheme: BinningScheme, threads: int = 1) -> np.ndarray:
    """SLCE at every record of ``d``, with sums over ``d`` itself."""
    if d.n == 0:
        raise ValueError("local calibration of an empty dataset is undefined")
    spec, x = _kernel_inputs(d, spec)
    bins = scheme.index(d.conf)
    num, den = binned_kernel_sums(spec, bins, bins, d.conf - d.correct,
                                  query_feats=x, ref_feats=x,
                                  query_groups=d.groups, ref_groups=d.groups,
                                  threads=threads)
    return num / den


def slce_at(d: Dataset, i: int, spec: KernelSpec, scheme: BinningScheme) -> float:
    feats = d.features.values[i:i + 1] if spec.family != GROUP else None
    groups = [d.groups[i]] if spec.family == GROUP else None
    return float(slce_query(d, d.conf[i], feats, spec, scheme, groups=groups)[0])


def lce_at(d: Dataset, i: int, spec: KernelSpec, scheme: BinningScheme) -> float:
    return abs(slce_at(d, i, spec, scheme))


def mlce(d: Dataset, spec: KernelSpec, scheme: BinningScheme, threads: int = 1) -> LceReport:
    """Per-record LCE over the whole dataset, summarized by its max (MLCE) and mean."""
    s = slce_all(d, spec, scheme, threads=threads)
    if spec.family != GROUP:
        spec = spec.resolve(d.features.d)
    return LceReport(values=np.abs(s), signed=s, kernel=spec, scheme=scheme)


def lce_landscape(d: Dataset, spec: KernelSpec, scheme: BinningScheme,
                  embed2d: FeatureMatrix | np.ndarray, threads: int = 1) -> list[tuple]:
    """Rows of ``(id, ex, ey, conf, bin, lce, slce)`` for plotting elsewhere."""
    e = embed2d.values if isinstance(embed2d, FeatureMatrix) else np.asarray(embed2d, dtype=float)
    if e.ndim != 2 or e.shape[1] != 2:
        raise ValueError("landscape embedding must have exactly 2 columns")
    if e.shape[0] != d.n:
        raise ValueError("landscape embedding rows must match the dataset")
    s = slce_all(d, spec, scheme, threads=threads)
    bins = scheme.index(d.conf)
    return [(d.ids[i], float(e[i, 0]), float(e[i, 1]), float(d.conf[i]), int(bins[i]),
             abs(float(s[i])), float(s[i])) for i in range(d.n)]


# --------------------------------------------------------------------------
# Fairness


def group_mce(d: Dataset, scheme: BinningScheme) -> tuple[dict[str, float], float]:
    """MCE within each labelled group, and the worst of them.

    Records without a group label are ignored.
    """
    groups = sorted({g for g in d.groups if g is not None})
    if not groups:
        raise ValueError("no record carries a group label")
    labels = np.asarray(d.groups, dtype=object)
    correct = d.correct
    out = {}
    for g in groups:
        mask = labels == g
        out[g] = _mce(_bin_stats(d.conf[mask], correct[mask], scheme))
    return out, max(out.values())


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length sequences of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation is undefined for a constant sequence")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def global_summary(d: Dataset, scheme: BinningScheme) -> dict:
    """ECE, MCE, NLL and Brier in one pass, with the NLL clamp count."""
    stats = bin_stats(d, scheme)
    n_val, clamped = nll(d, return_clamped=True)
    return {
        "n": d.n,
        "accuracy": float(d.correct.mean()),
        "ece": _ece(stats),
        "mce": _mce(stats),
        "nll": n_val,
        "nll_clamped": clamped,
        "brier": brier(d),
    }
