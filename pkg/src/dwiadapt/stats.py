"""ROC evaluation: AUC, DeLong's test for correlated ROC curves, and the
Holm-Bonferroni step-down correction.

AUC uses the Mann-Whitney kernel with the 0.5 midrank convention for tied
scores. DeLong variances come from structural components: per-positive
means of the kernel against all negatives (V10) and per-negative means
against all positives (V01), with unbiased (ddof 1) covariance estimates.
Two paired classifiers with identical rankings have zero variance of the
AUC difference; that case is reported as p = 1 with a degenerate flag so
result tables stay total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LABELS, MALIGNANT
from .errors import FormatError, InvalidP, LabelMismatch, SingleClass


@dataclass(frozen=True)
class ScoredSet:
    """Parallel malignancy scores and ground-truth labels for one test set."""

    scores: tuple[float, ...]
    labels: tuple[str, ...]

    def __init__(self, scores, labels):
        scores = tuple(float(s) for s in scores)
        labels = tuple(str(l) for l in labels)
        if len(scores) != len(labels):
            raise FormatError(f"{len(scores)} scores vs {len(labels)} labels")
        for s in scores:
            if not (math.isfinite(s) and 0.0 <= s <= 1.0):
                raise FormatError(f"scores must lie in [0, 1], got {s}")
        for l in labels:
            if l not in LABELS:
                raise FormatError(f"label must be one of {LABELS}, got {l!r}")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.scores)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Scores of (malignant, benign) cases, in input order."""
        s = np.array(self.scores, dtype=np.float64)
        pos = np.array([l == MALIGNANT for l in self.labels], dtype=bool)
        return s[pos], s[~pos]


@dataclass(frozen=True)
class DelongComparison:
    auc_a: float
    auc_b: float
    var_a: float
    var_b: float
    cov_ab: float
    z: float
    p_two_sided: float
    degenerate: bool


@dataclass(frozen=True)
class HolmResult:
    """Step-down decisions, reported in the original hypothesis order."""

    pvalues: tuple[float, ...]
    order: tuple[int, ...]
    reject: tuple[bool, ...]
    alpha: float


def _kernel(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Mann-Whitney kernel matrix: 1 for a win, 0.5 for a tie, else 0."""
    x = pos[:, None]
    y = neg[None, :]
    return (x > y).astype(np.float64) + 0.5 * (x == y)


def auc(scored: ScoredSet) -> float:
    """Area under the ROC curve as the mean Mann-Whitney kernel."""
    pos, neg = scored.split()
    if pos.size == 0 or neg.size == 0:
        raise SingleClass("AUC needs at least one case of each class")
    return float(_kernel(pos, neg).mean())


def _structural_components(scored: ScoredSet) -> tuple[float, np.ndarray, np.ndarray]:
    pos, neg = scored.split()
    if pos.size == 0 or neg.size == 0:
        raise SingleClass("DeLong components need both classes")
    k = _kernel(pos, neg)
    v10 = k.mean(axis=1)
    v01 = k.mean(axis=0)
    return float(k.mean()), v10, v01


def _cov1(u: np.ndarray, v: np.ndarray) -> float:
    """Unbiased covariance; 0 when fewer than 2 observations."""
    if u.size < 2:
        return 0.0
    return float(np.sum((u - u.mean()) * (v - v.mean())) / (u.size - 1))


def delong_test(set_a: ScoredSet, set_b: ScoredSet) -> DelongComparison:
    """DeLong z-test for the AUC difference of two paired classifiers.

    The sets must score the same cases in the same order (identical label
    vectors). When the variance of the difference degenerates to zero,
    meaning the two score vectors rank the cases identically, the result
    carries p = 1.0 and the degenerate flag instead of a 0/0.
    """
    if set_a.labels != set_b.labels:
        raise LabelMismatch("paired test requires identical label vectors")
    auc_a, v10_a, v01_a = _structural_components(set_a)
    auc_b, v10_b, v01_b = _structural_components(set_b)
    m = v10_a.size
    n = v01_a.size
    var_a = _cov1(v10_a, v10_a) / m + _cov1(v01_a, v01_a) / n
    var_b = _cov1(v10_b, v10_b) / m + _cov1(v01_b, v01_b) / n
    cov_ab = _cov1(v10_a, v10_b) / m + _cov1(v01_a, v01_b) / n
    denom_sq = var_a + var_b - 2.0 * cov_ab
    if denom_sq <= 0.0 or not math.isfinite(denom_sq):
        return DelongComparison(auc_a, auc_b, var_a, var_b, cov_ab, 0.0, 1.0, True)
    z = (auc_a - auc_b) / math.sqrt(denom_sq)
    # two-sided tail of the standard normal; erfc keeps full precision in
    # the far tail where 1 - Phi(z) underflows
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return DelongComparison(auc_a, auc_b, var_a, var_b, cov_ab, z, min(p, 1.0), False)


def holm_bonferroni(pvalues, alpha: float = 0.05) -> HolmResult:
    """Step-down multiple-testing correction.

    Sorted ascending, p_(k) is rejected while p_(k) <= alpha/(m - k + 1);
    the first failure stops the procedure, so rejections are downward
    closed in the sorted order.
    """
    pvalues = tuple(float(p) for p in pvalues)
    for p in pvalues:
        if not (math.isfinite(p) and 0.0 <= p <= 1.0):
            raise InvalidP(f"p-values must lie in [0, 1], got {p}")
    if not (math.isfinite(alpha) and 0.0 < alpha < 1.0):
        raise InvalidP(f"alpha must lie in (0, 1), got {alpha}")
    m = len(pvalues)
    order = tuple(int(i) for i in np.argsort(np.array(pvalues), kind="stable"))
    reject = [False] * m
    for k, idx in enumerate(order, start=1):
        if pvalues[idx] <= alpha / (m - k + 1):
            reject[idx] = True
        else:
            break
    return HolmResult(pvalues, order, tuple(reject), alpha)
