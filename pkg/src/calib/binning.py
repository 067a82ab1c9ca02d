"""Confidence bins shared by every metric and recalibrator.

Bins are left-closed and right-open, except the last one which also holds
``conf == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EQUAL_WIDTH = "equal-width"
EQUAL_MASS = "equal-mass"


@dataclass(frozen=True)
class BinningScheme:
    kind: str
    edges: tuple[float, ...]

    def __post_init__(self):
        e = self.edges
        if len(e) < 2 or e[0] != 0.0 or e[-1] != 1.0:
            raise ValueError(f"bin edges must run from 0 to 1, got {e}")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"bin edges must be strictly ascending, got {e}")

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def index(self, conf) -> np.ndarray:
        """Vectorized bin lookup; raises on values outside [0, 1]."""
        c = np.asarray(conf, dtype=float)
        if np.any(~((c >= 0.0) & (c <= 1.0))):
            raise ValueError("confidence outside [0, 1]")
        # interior edges only: searchsorted 'right' gives the left-closed convention
        idx = np.searchsorted(np.asarray(self.edges[1:-1]), c, side="right")
        return idx.astype(np.int64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "edges": list(self.edges)}

    @classmethod
    def from_dict(cls, obj: dict) -> "BinningScheme":
        return cls(kind=obj["kind"], edges=tuple(float(x) for x in obj["edges"]))


def equal_width(n_bins: int) -> BinningScheme:
    if n_bins < 1:
        raise ValueError("need at least one bin")
    edges = [i / n_bins for i in range(n_bins + 1)]
    return BinningScheme(EQUAL_WIDTH, tuple(edges))


def equal_mass(n_bins: int, confs) -> BinningScheme:
    """Bins holding roughly equal numbers of ``confs``.

    Interior edges are linearly interpolated quantiles. An edge is dropped
    when it repeats the previous one, reaches 1, or sits at or below the
    smallest confidence (its lower bin would be empty), so the result may
    have fewer bins than requested.
    """
    if n_bins < 1:
        raise ValueError("need at least one bin")
    c = np.asarray(confs, dtype=float)
    if c.size == 0:
        raise ValueError("equal-mass binning needs at least one confidence")
    qs = np.quantile(c, np.arange(1, n_bins) / n_bins, method="linear")
    lowest = float(c.min())
    edges = [0.0]
    for q in qs:
        q = float(q)
        if q > lowest and edges[-1] < q < 1.0:
            edges.append(q)
    edges.append(1.0)
    return BinningScheme(EQUAL_MASS, tuple(edges))


def bin_index(scheme: BinningScheme, conf: float) -> int:
    return int(scheme.index(conf))


def make_scheme(kind: str, n_bins: int, confs=None) -> BinningScheme:
    if kind == EQUAL_WIDTH:
        return equal_width(n_bins)
    if kind == EQUAL_MASS:
        if confs is None:
            raise ValueError("equal-mass binning needs confidences")
        return equal_mass(n_bins, confs)
    raise ValueError(f"unknown bin kind {kind!r}")
