"""ROC analysis for anomaly scores (higher score = more likely adversarial)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from headdet.errors import ContractError


@dataclass(frozen=True)
class RocResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    n_benign: int
    n_adv: int

    @property
    def curve(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def trapezoid_area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def _scores(values, name: str) -> np.ndarray:
    s = np.asarray(values, dtype=np.float64).ravel()
    if s.size == 0:
        raise ContractError(f"{name} scores are empty")
    if not np.all(np.isfinite(s)):
        raise ContractError(f"{name} scores contain non-finite values")
    return s


def auc_score(benign_scores, adv_scores) -> float:
    """Mann-Whitney AUC: P(adv > benign) + P(adv == benign) / 2."""
    b = np.sort(_scores(benign_scores, "benign"))
    a = _scores(adv_scores, "adversarial")
    below = np.searchsorted(b, a, side="left")
    upto = np.searchsorted(b, a, side="right")
    # integer pair counts keep the statistic exact until the final division
    wins = int(below.sum())
    ties = int((upto - below).sum())
    return (2 * wins + ties) / (2 * b.size * a.size)


def roc_auc(benign_scores, adv_scores) -> RocResult:
    """AUC plus the ROC curve swept over every distinct score threshold."""
    b = _scores(benign_scores, "benign")
    a = _scores(adv_scores, "adversarial")
    scores = np.concatenate([a, b])
    is_adv = np.concatenate([np.ones(a.size, bool), np.zeros(b.size, bool)])
    order = np.argsort(-scores, kind="stable")
    scores, is_adv = scores[order], is_adv[order]
    last_of_block = np.r_[scores[1:] != scores[:-1], True]
    tp = np.cumsum(is_adv)[last_of_block]
    fp = np.cumsum(~is_adv)[last_of_block]
    tpr = np.r_[0.0, tp / a.size]
    fpr = np.r_[0.0, fp / b.size]
    return RocResult(auc_score(b, a), fpr, tpr, int(b.size), int(a.size))
