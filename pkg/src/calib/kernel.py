"""Feature-space similarity kernels, the within-bin kernel reduction, and PCA.

The Laplacian and Gaussian kernels divide the exponent by the feature
dimension ``d``, so the same bandwidth means roughly the same neighborhood
size regardless of how many features there are::

    laplacian(u, v) = exp(-|u - v|_1 / (d * gamma))
    gaussian(u, v)  = exp(-|u - v|_2^2 / (d * gamma^2))

The group-indicator kernel is 1 when two records share a group label and 0
otherwise.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import FeatureMatrix

LAPLACIAN = "laplacian"
GAUSSIAN = "gaussian"
GROUP = "group"
FAMILIES = (LAPLACIAN, GAUSSIAN, GROUP)

# target number of kernel entries held in memory per block
BLOCK_ELEMS = 1 << 20


@dataclass(frozen=True)
class KernelSpec:
    family: str = LAPLACIAN
    gamma: float = 1.0
    d: int | None = None  # exponent normalizer; None means "feature dimension"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family != GROUP and not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError(f"bandwidth must be positive and finite, got {self.gamma}")
        if self.d is not None and self.d < 1:
            raise ValueError("kernel dimension normalizer must be >= 1")

    def resolve(self, d: int) -> "KernelSpec":
        """Pin the normalizer to ``d`` if it was left open."""
        return self if self.d is not None else KernelSpec(self.family, self.gamma, d)

    def to_dict(self) -> dict:
        return {"family": self.family, "gamma": self.gamma, "d": self.d}

    @classmethod
    def from_dict(cls, obj: dict) -> "KernelSpec":
        d = obj.get("d")
        return cls(obj["family"], float(obj["gamma"]), None if d is None else int(d))


def eval_kernel(spec: KernelSpec, u=None, v=None, group_u=None, group_v=None) -> float:
    """Kernel value for a single pair."""
    if spec.family == GROUP:
        if group_u is None or group_v is None:
            raise ValueError("group-indicator kernel needs group labels on both sides")
        return 1.0 if group_u == group_v else 0.0
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.size} vs {v.size}")
    d = spec.d if spec.d is not None else u.size
    if spec.family == LAPLACIAN:
        return math.exp(-float(np.abs(u - v).sum()) / (d * spec.gamma))
    return math.exp(-float(((u - v) ** 2).sum()) / (d * spec.gamma ** 2))


def _log_weights(spec: KernelSpec, xq: np.ndarray, xr: np.ndarray, d: int) -> np.ndarray:
    if spec.family == LAPLACIAN:
        return cdist(xq, xr, "cityblock") * (-1.0 / (d * spec.gamma))
    return cdist(xq, xr, "sqeuclidean") * (-1.0 / (d * spec.gamma ** 2))


def kernel_matrix(spec: KernelSpec, xq, xr, groups_q=None, groups_r=None) -> np.ndarray:
    """Dense kernel block between query rows and reference rows."""
    if spec.family == GROUP:
        gq = np.asarray(groups_q, dtype=object)
        gr = np.asarray(groups_r, dtype=object)
        return (gq[:, None] == gr[None, :]).astype(np.float64)
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    xr = np.atleast_2d(np.asarray(xr, dtype=float))
    if xq.shape[1] != xr.shape[1]:
        raise ValueError(f"dimension mismatch: {xq.shape[1]} vs {xr.shape[1]}")
    d = spec.d if spec.d is not None else xq.shape[1]
    return np.exp(_log_weights(spec, xq, xr, d))


def group_codes(groups_q, groups_r) -> tuple[np.ndarray, np.ndarray]:
    """Integer-code two group label sequences against a shared vocabulary."""
    if any(g is None for g in groups_q) or any(g is None for g in groups_r):
        raise ValueError("group-indicator kernel needs a group label on every record")
    vocab = {g: i for i, g in enumerate(sorted(set(groups_q) | set(groups_r)))}
    return (np.fromiter((vocab[g] for g in groups_q), np.int64, len(groups_q)),
            np.fromiter((vocab[g] for g in groups_r), np.int64, len(groups_r)))


def binned_kernel_sums(spec: KernelSpec, query_bins, ref_bins, ref_values,
                       query_feats=None, ref_feats=None,
                       query_groups=None, ref_groups=None,
                       threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Within-bin kernel-weighted sums for every query.

    For query ``q`` in bin ``b`` this returns::

        num[q] = sum_{j : ref_bins[j] == b} w(q, j) * ref_values[j]
        den[q] = sum_{j : ref_bins[j] == b} w(q, j)

    where ``w`` is the kernel divided by its largest value over the bin's
    references. The rescaling cancels in ``num / den`` but keeps the ratio
    defined when every raw kernel value underflows (tiny bandwidths).
    ``ref_values`` may be 1-D or 2-D (one column per quantity).

    Work is split into fixed blocks that depend only on the data, so the
    result is bit-identical for any ``threads``.
    """
    qb = np.asarray(query_bins, dtype=np.int64)
    rb = np.asarray(ref_bins, dtype=np.int64)
    vals = np.asarray(ref_values, dtype=np.float64)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    nq = qb.size
    num = np.zeros((nq, vals.shape[1]))
    den = np.zeros(nq)

    if spec.family == GROUP:
        gq, gr = group_codes(query_groups, ref_groups)
        d = 0
    else:
        xq = np.asarray(query_feats.values if isinstance(query_feats, FeatureMatrix) else query_feats,
                        dtype=np.float64)
        xr = np.asarray(ref_feats.values if isinstance(ref_feats, FeatureMatrix) else ref_feats,
                        dtype=np.float64)
        if xq.ndim != 2 or xr.ndim != 2 or xq.shape[1] != xr.shape[1]:
            raise ValueError("query and reference features must be 2-D with equal width")
        if xq.shape[0] != nq or xr.shape[0] != rb.size:
            raise ValueError("feature rows do not match bin assignments")
        d = spec.d if spec.d is not None else xq.shape[1]

    tasks = []
    for b in np.unique(qb):
        qi = np.flatnonzero(qb == b)
        ri = np.flatnonzero(rb == b)
        if ri.size == 0:
            continue
        step = max(1, BLOCK_ELEMS // ri.size)
        for s in range(0, qi.size, step):
            tasks.append((qi[s:s + step], ri))

    def run(task):
        qi, ri = task
        if spec.family == GROUP:
            w = (gq[qi][:, None] == gr[ri][None, :]).astype(np.float64)
        else:
            logw = _log_weights(spec, xq[qi], xr[ri], d)
            logw -= logw.max(axis=1, keepdims=True)
            w = np.exp(logw)
        den[qi] = w.sum(axis=1)
        for k in range(vals.shape[1]):
            num[qi, k] = (w * vals[ri, k]).sum(axis=1)

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, tasks))
    else:
        for t in tasks:
            run(t)
    return (num[:, 0] if squeeze else num), den


# --------------------------------------------------------------------------
# PCA


@dataclass(frozen=True, eq=False)
class PcaTransform:
    mean: np.ndarray        # (D,)
    components: np.ndarray  # (k, D), orthonormal rows

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "components": self.components.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "PcaTransform":
        comps = np.array(obj["components"], dtype=np.float64)
        mean = np.array(obj["mean"], dtype=np.float64)
        return cls(mean=mean, components=comps.reshape(-1, mean.size))


def fit_pca(features: FeatureMatrix | np.ndarray, k: int) -> PcaTransform:
    """Top-``k`` principal directions from the covariance eigendecomposition.

    Components are sorted by decreasing eigenvalue and signed so that each
    one's largest-magnitude entry is positive.
    """
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=float)
    n, dim = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= k <= min(n, dim):
        raise ValueError(f"PCA target dimension {k} must be in 1..{min(n, dim)}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:k]
    comps = evecs[:, order].T.copy()
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaTransform(mean=mean, components=comps)


def apply_pca(t: PcaTransform, features: FeatureMatrix | np.ndarray) -> FeatureMatrix:
    x = features.values if isinstance(features, FeatureMatrix) else np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != t.mean.size:
        raise ValueError(f"PCA fitted on {t.mean.size} features, got {x.shape[1]}")
    return FeatureMatrix((x - t.mean) @ t.components.T)
