"""Post-hoc recalibration: local recalibration (LoRe) and global baselines.

LoRe replaces a confidence with the kernel-weighted accuracy of the
reference records that share its confidence bin. With a very wide kernel it
reduces to histogram binning; with a very narrow one it returns the
correctness of the most similar reference.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .binning import BinningScheme
from .dataset import Dataset, FeatureMatrix, atomic_write_text
from .kernel import GROUP, KernelSpec, PcaTransform, apply_pca, binned_kernel_sums, fit_pca

log = logging.getLogger(__name__)

FORMAT_NAME = "calib.recalibrator"
FORMAT_VERSION = 1
TS_BOUNDS = (0.05, 20.0)
TS_TOL = 1e-6
PROB_FLOOR = 1e-12


class FormatVersionError(ValueError):
    """A saved recalibrator has an unknown format, version or method tag."""


class CapabilityError(ValueError):
    """The data lacks something the method needs (e.g. probability vectors)."""


# --------------------------------------------------------------------------
# States


@dataclass(frozen=True, eq=False)
class LoReState:
    conf: np.ndarray
    correct: np.ndarray
    features: np.ndarray | None      # post-PCA reference features
    groups: tuple | None
    kernel: KernelSpec
    scheme: BinningScheme
    pca: PcaTransform | None = None
    fallback: float = 0.0            # global accuracy of the reference set
    method: str = field(default="lore", init=False)

    @property
    def n(self) -> int:
        return self.conf.size


@dataclass(frozen=True, eq=False)
class HbState:
    scheme: BinningScheme
    acc: np.ndarray
    counts: np.ndarray
    fallback: float
    method: str = field(default="hb", init=False)


@dataclass(frozen=True, eq=False)
class TsState:
    temperature: float
    method: str = field(default="ts", init=False)


@dataclass(frozen=True, eq=False)
class IrState:
    x: np.ndarray   # ascending breakpoints
    v: np.ndarray   # non-decreasing step values
    method: str = field(default="ir", init=False)


@dataclass(frozen=True, eq=False)
class GroupwiseState:
    base: str                      # "hb" or "ts"
    states: dict
    fallback: object               # global fit used for unseen groups

    @property
    def method(self) -> str:
        return f"group-{self.base}"


# --------------------------------------------------------------------------
# LoRe


def fit_lore(recal: Dataset, spec: KernelSpec, scheme: BinningScheme,
             pca_dim: int | None = None) -> LoReState:
    """Store the recalibration set; optionally fit PCA on its features first."""
    if recal.n == 0:
        raise ValueError("LoRe needs a non-empty recalibration set")
    feats, groups, pca = None, None, None
    if spec.family == GROUP:
        if any(g is None for g in recal.groups):
            raise ValueError("group-indicator kernel needs a group label on every record")
        groups = tuple(recal.groups)
    else:
        if recal.features is None:
            raise ValueError("LoRe needs reference features")
        fm = recal.features
        if pca_dim is not None:
            pca = fit_pca(fm, pca_dim)
            fm = apply_pca(pca, fm)
        feats = fm.values.copy()
        spec = spec.resolve(fm.d)
    correct = recal.correct
    return LoReState(conf=recal.conf.copy(), correct=correct, features=feats, groups=groups,
                     kernel=spec, scheme=scheme, pca=pca, fallback=float(correct.mean()))


def apply_lore(s: LoReState, conf, feat=None, groups=None, threads: int = 1,
               return_flags: bool = False):
    """Recalibrated confidence for one query or a batch.

    ``feat`` holds raw (pre-PCA) query features, one row per confidence.
    Queries with no reference in their bin (or, for the group kernel, no
    same-group reference in their bin) get the global reference accuracy and
    are flagged.
    """
    scalar = np.ndim(conf) == 0
    c = np.atleast_1d(np.asarray(conf, dtype=float))
    xq = None
    if s.kernel.family != GROUP:
        if feat is None:
            raise ValueError("LoRe needs query features")
        x = feat.values if isinstance(feat, FeatureMatrix) else np.asarray(feat, dtype=float)
        x = x.reshape(c.size, -1)
        if s.pca is not None:
            x = apply_pca(s.pca, x).values
        if x.shape[1] != s.features.shape[1]:
            raise ValueError(f"query features have {x.shape[1]} columns, references {s.features.shape[1]}")
        xq = x
    elif groups is None:
        raise ValueError("group-indicator LoRe needs query group labels")
    num, den = binned_kernel_sums(s.kernel, s.scheme.index(c), s.scheme.index(s.conf), s.correct,
                                  query_feats=xq, ref_feats=s.features,
                                  query_groups=groups, ref_groups=s.groups, threads=threads)
    flags = den <= 0
    out = np.where(flags, s.fallback, num / np.where(flags, 1.0, den))
    if flags.any():
        log.warning("LoRe: %d queries had no reference in their bin; used fallback %.6f",
                    int(flags.sum()), s.fallback)
    if scalar:
        return (float(out[0]), bool(flags[0])) if return_flags else float(out[0])
    return (out, flags) if return_flags else out


# --------------------------------------------------------------------------
# Histogram binning


def fit_hb(recal: Dataset, scheme: BinningScheme) -> HbState:
    if recal.n == 0:
        raise ValueError("histogram binning needs a non-empty recalibration set")
    k = scheme.n_bins
    idx = scheme.index(recal.conf)
    correct = recal.correct
    counts = np.bincount(idx, minlength=k)
    hits = np.bincount(idx, weights=correct, minlength=k)
    acc = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return HbState(scheme=scheme, acc=acc, counts=counts, fallback=float(correct.mean()))


def apply_hb(s: HbState, conf, return_flags: bool = False):
    scalar = np.ndim(conf) == 0
    idx = s.scheme.index(np.atleast_1d(np.asarray(conf, dtype=float)))
    flags = s.counts[idx] == 0
    out = np.where(flags, s.fallback, np.nan_to_num(s.acc[idx]))
    if flags.any():
        log.warning("HB: %d queries fell in bins empty at fit time; used fallback %.6f",
                    int(flags.sum()), s.fallback)
    if scalar:
        return (float(out[0]), bool(flags[0])) if return_flags else float(out[0])
    return (out, flags) if return_flags else out


# --------------------------------------------------------------------------
# Temperature scaling


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _golden_section(f, lo: float, hi: float, tol: float) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def ts_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    lp = _log_softmax(np.asarray(logits, dtype=float) / temperature)
    return float(-lp[np.arange(lp.shape[0]), labels].mean())


def fit_ts_logits(logits, labels, bounds=TS_BOUNDS, tol=TS_TOL) -> TsState:
    """Temperature minimizing the NLL, by golden-section search over ``bounds``."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("temperature scaling needs a non-empty 2-D logit array")
    t = _golden_section(lambda T: ts_nll(z, y, T), bounds[0], bounds[1], tol)
    log.info("TS: temperature %.6f found in bracket [%g, %g]", t, *bounds)
    if min(t - bounds[0], bounds[1] - t) < 10 * tol:
        log.warning("TS: optimum %.6f sits on the search bracket edge", t)
    return TsState(temperature=t)


def _logp(probs) -> np.ndarray:
    return np.log(np.maximum(np.asarray(probs, dtype=float), PROB_FLOOR))


def fit_ts(recal: Dataset) -> TsState:
    if recal.probs is None:
        raise CapabilityError("temperature scaling needs full probability vectors")
    return fit_ts_logits(_logp(recal.probs), recal.y_true)


def apply_ts_logits(s: TsState, logits) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    return np.exp(_log_softmax(z / s.temperature))


def apply_ts(s: TsState, probs) -> np.ndarray:
    """Rescale probability vectors by the fitted temperature."""
    p = np.asarray(probs, dtype=float)
    out = apply_ts_logits(s, _logp(p))
    return out[0] if p.ndim == 1 else out


# --------------------------------------------------------------------------
# Isotonic regression


def pav(y, w=None) -> np.ndarray:
    """Pool-adjacent-violators fit of a non-decreasing sequence to ``y``."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    means, weights, sizes = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            tot = weights[-1] + w2
            means[-1] = (means[-1] * weights[-1] + m2 * w2) / tot
            weights[-1] = tot
            sizes[-1] += s2
    return np.repeat(means, sizes)


def fit_ir(recal: Dataset) -> IrState:
    if recal.n == 0:
        raise ValueError("isotonic regression needs a non-empty recalibration set")
    # equal confidences are pooled before PAV so the fit is a function of conf
    x, inv = np.unique(recal.conf, return_inverse=True)
    w = np.bincount(inv).astype(float)
    y = np.bincount(inv, weights=recal.correct) / w
    return IrState(x=x, v=pav(y, w))


def apply_ir(s: IrState, conf):
    scalar = np.ndim(conf) == 0
    c = np.atleast_1d(np.asarray(conf, dtype=float))
    idx = np.clip(np.searchsorted(s.x, c, side="right") - 1, 0, s.x.size - 1)
    out = s.v[idx]
    return float(out[0]) if scalar else out


# --------------------------------------------------------------------------
# Group-wise wrappers


def fit_groupwise(method: str, recal: Dataset, scheme: BinningScheme | None = None) -> GroupwiseState:
    """Fit ``method`` ("hb" or "ts") separately inside each group."""
    if method not in ("hb", "ts"):
        raise ValueError(f"group-wise wrapper supports hb and ts, not {method!r}")
    if method == "hb" and scheme is None:
        raise ValueError("group-wise histogram binning needs a binning scheme")
    labels = np.asarray(recal.groups, dtype=object)
    names = sorted({g for g in recal.groups if g is not None})
    if not names:
        raise ValueError("group-wise recalibration needs group labels")

    def fit(ds):
        return fit_hb(ds, scheme) if method == "hb" else fit_ts(ds)

    states = {g: fit(recal.subset(np.flatnonzero(labels == g))) for g in names}
    return GroupwiseState(base=method, states=states, fallback=fit(recal))


def apply_groupwise(s: GroupwiseState, values, groups, return_flags: bool = False):
    """Dispatch each query to its group's fit.

    ``values`` are confidences (hb) or probability rows (ts); the result is
    the recalibrated confidence (hb) or probability rows (ts). Unknown groups
    use the global fit and are flagged.
    """
    groups = list(groups)
    if s.base == "hb":
        vals = np.asarray(values, dtype=float).reshape(len(groups))
        out = np.empty(len(groups))
    else:
        vals = np.asarray(values, dtype=float).reshape(len(groups), -1)
        out = np.empty_like(vals)
    flags = np.array([g not in s.states for g in groups], dtype=bool)
    labels = np.asarray([g if g in s.states else None for g in groups], dtype=object)
    for key in sorted(s.states) + [None]:
        mask = labels == key if key is not None else flags
        if not mask.any():
            continue
        st = s.states[key] if key is not None else s.fallback
        out[mask] = apply_hb(st, vals[mask]) if s.base == "hb" else apply_ts(st, vals[mask])
    if flags.any():
        log.warning("group-wise %s: %d queries from unseen groups used the global fit",
                    s.base, int(flags.sum()))
    return (out, flags) if return_flags else out


# --------------------------------------------------------------------------
# Whole-dataset application


def recalibrate_dataset(state, d: Dataset, threads: int = 1) -> tuple[Dataset, np.ndarray]:
    """Replace confidences (and, for TS, probabilities) of ``d``.

    Returns the new dataset and a per-record fallback flag array.
    """
    flags = np.zeros(d.n, dtype=bool)
    method = state.method
    if method == "lore":
        feats = d.features if state.kernel.family != GROUP else None
        conf, flags = apply_lore(state, d.conf, feats, groups=d.groups, threads=threads,
                                 return_flags=True)
        return d.with_conf(conf), flags
    if method == "hb":
        conf, flags = apply_hb(state, d.conf, return_flags=True)
        return d.with_conf(conf), flags
    if method == "ir":
        return d.with_conf(apply_ir(state, d.conf)), flags
    if method == "ts":
        if d.probs is None:
            raise CapabilityError("temperature scaling needs full probability vectors")
        probs = apply_ts(state, d.probs)
        return _with_probs(d, probs), flags
    if method == "group-hb":
        conf, flags = apply_groupwise(state, d.conf, d.groups, return_flags=True)
        return d.with_conf(conf), flags
    if method == "group-ts":
        if d.probs is None:
            raise CapabilityError("temperature scaling needs full probability vectors")
        probs, flags = apply_groupwise(state, d.probs, d.groups, return_flags=True)
        return _with_probs(d, probs), flags
    raise ValueError(f"unknown recalibration method {method!r}")


def _with_probs(d: Dataset, probs: np.ndarray) -> Dataset:
    pred = np.argmax(probs, axis=1)
    if np.any(pred != d.y_pred):
        raise AssertionError("temperature scaling changed a predicted label")
    return d.with_conf(probs.max(axis=1), probs=probs)


# --------------------------------------------------------------------------
# Persistence


def _state_to_dict(s) -> dict:
    m = s.method
    if m == "lore":
        return {
            "conf": s.conf.tolist(),
            "correct": s.correct.tolist(),
            "features": None if s.features is None else s.features.tolist(),
            "groups": None if s.groups is None else list(s.groups),
            "kernel": s.kernel.to_dict(),
            "scheme": s.scheme.to_dict(),
            "pca": None if s.pca is None else s.pca.to_dict(),
            "fallback": s.fallback,
        }
    if m == "hb":
        return {"scheme": s.scheme.to_dict(),
                "acc": [None if math.isnan(a) else a for a in s.acc.tolist()],
                "counts": s.counts.tolist(), "fallback": s.fallback}
    if m == "ts":
        return {"temperature": s.temperature}
    if m == "ir":
        return {"x": s.x.tolist(), "v": s.v.tolist()}
    if m in ("group-hb", "group-ts"):
        return {"base": s.base,
                "states": {g: _state_to_dict(st) for g, st in sorted(s.states.items())},
                "fallback": _state_to_dict(s.fallback)}
    raise ValueError(f"cannot serialize method {m!r}")


def _state_from_dict(method: str, o: dict):
    if method == "lore":
        feats = o["features"]
        return LoReState(
            conf=np.array(o["conf"], dtype=np.float64),
            correct=np.array(o["correct"], dtype=np.float64),
            features=None if feats is None else np.array(feats, dtype=np.float64).reshape(len(o["conf"]), -1),
            groups=None if o["groups"] is None else tuple(o["groups"]),
            kernel=KernelSpec.from_dict(o["kernel"]),
            scheme=BinningScheme.from_dict(o["scheme"]),
            pca=None if o["pca"] is None else PcaTransform.from_dict(o["pca"]),
            fallback=float(o["fallback"]),
        )
    if method == "hb":
        acc = np.array([np.nan if a is None else a for a in o["acc"]], dtype=np.float64)
        return HbState(scheme=BinningScheme.from_dict(o["scheme"]), acc=acc,
                       counts=np.array(o["counts"], dtype=np.int64), fallback=float(o["fallback"]))
    if method == "ts":
        return TsState(temperature=float(o["temperature"]))
    if method == "ir":
        return IrState(x=np.array(o["x"], dtype=np.float64), v=np.array(o["v"], dtype=np.float64))
    if method in ("group-hb", "group-ts"):
        base = o["base"]
        return GroupwiseState(base=base,
                              states={g: _state_from_dict(base, st) for g, st in o["states"].items()},
                              fallback=_state_from_dict(base, o["fallback"]))
    raise FormatVersionError(f"unknown recalibration method tag {method!r}")


def recalibrator_json(state) -> str:
    doc = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "method": state.method,
           "params": _state_to_dict(state)}
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def save_recalibrator(state, path) -> None:
    atomic_write_text(path, recalibrator_json(state))


def load_recalibrator(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT_NAME:
        raise FormatVersionError(f"{path}: not a recalibrator file")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: unsupported format version {doc.get('version')!r}")
    return _state_from_dict(doc.get("method"), doc["params"])
