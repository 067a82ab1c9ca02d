"""Selective prediction: the abstain-below-threshold policy and rejection curves.

Costs are positive: answering "unsure" costs ``u``, a wrong answer costs
``w``, a correct answer costs nothing. A calibrated model minimizes expected
cost by abstaining whenever its confidence is below ``1 - u/w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset


@dataclass(frozen=True)
class CostSpec:
    u: float = 1.0
    w: float = 10.0

    def __post_init__(self):
        if not (self.u > 0 and self.w > self.u):
            raise ValueError(f"costs need w > u > 0, got u={self.u}, w={self.w}")

    @property
    def threshold(self) -> float:
        return 1.0 - self.u / self.w


@dataclass(frozen=True)
class PolicyResult:
    total_cost: float
    n_unsure: int
    n_wrong: int
    n_correct: int


def run_policy(d: Dataset, c: CostSpec) -> PolicyResult:
    unsure = d.conf < c.threshold
    wrong = ~unsure & (d.y_pred != d.y_true)
    n_unsure = int(unsure.sum())
    n_wrong = int(wrong.sum())
    return PolicyResult(total_cost=c.u * n_unsure + c.w * n_wrong, n_unsure=n_unsure,
                        n_wrong=n_wrong, n_correct=d.n - n_unsure - n_wrong)


@dataclass(frozen=True, eq=False)
class RejectionCurve:
    model: np.ndarray    # errors among retained, for r = 0..N rejected
    oracle: np.ndarray
    random: np.ndarray

    @staticmethod
    def area(errors: np.ndarray) -> float:
        n = errors.size - 1
        return float(np.sum(errors[1:] + errors[:-1]) / (2.0 * n))

    @property
    def prr(self) -> float:
        a_rand = self.area(self.random)
        return (a_rand - self.area(self.model)) / (a_rand - self.area(self.oracle))


def rejection_curve(d: Dataset) -> RejectionCurve:
    """Errors left after rejecting the ``r`` least confident records.

    Ties in confidence are broken by record order.
    """
    n = d.n
    wrong = (d.y_pred != d.y_true).astype(np.int64)
    order = np.argsort(d.conf, kind="stable")
    rejected_errors = np.concatenate([[0], np.cumsum(wrong[order])])
    e = int(wrong.sum())
    model = (e - rejected_errors).astype(float)
    r = np.arange(n + 1)
    oracle = np.maximum(e - r, 0).astype(float)
    random = e * (1.0 - r / n)
    return RejectionCurve(model=model, oracle=oracle, random=random)


def prr(d: Dataset) -> float:
    """Prediction rejection area ratio: 1 for oracle ranking, 0 for random.

    Worse-than-random rankings give negative values, returned as is.
    """
    if d.n < 2:
        raise ValueError("PRR needs at least two records")
    wrong = int(np.sum(d.y_pred != d.y_true))
    if wrong == 0 or wrong == d.n:
        raise ValueError("PRR is undefined without both errors and correct predictions")
    return rejection_curve(d).prr


def cost_sweep(orig: Dataset, recal: Dataset, ratios, u: float = 1.0) -> list[tuple]:
    """Rows ``(ratio, cost_orig, cost_recal, improvement)`` with ``w = ratio * u``.

    ``improvement`` is positive when recalibration lowers the cost.
    """
    if orig.ids != recal.ids:
        raise ValueError("original and recalibrated predictions are not aligned by id")
    rows = []
    for ratio in ratios:
        c = CostSpec(u=u, w=float(ratio) * u)
        a = run_policy(orig, c).total_cost
        b = run_policy(recal, c).total_cost
        rows.append((float(ratio), a, b, a - b))
    return rows
