"""Ranking and calibration metrics with brute-force cross-checks.

The production AUC is the tie-aware rank statistic; auc_pairwise is the
O(n^2) definition it must match. Session-weighted AUC averages per-
session AUCs weighted by impression count, skipping single-class
sessions entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.stats

from .errors import DataError

LOGLOSS_CLIP = 1e-7


@dataclass
class ScoredExample:
    score: float
    label: int
    session_id: str | None = None
    weight: float = 1.0


@dataclass
class MetricReport:
    split: str
    n: int
    auc: float
    logloss: float
    gauc_pv: float | None = None

    def as_rows(self) -> list[tuple[str, float]]:
        rows = [("auc", self.auc), ("logloss", self.logloss)]
        if self.gauc_pv is not None:
            rows.append(("gauc_pv", self.gauc_pv))
        return rows


def _split(examples: list[ScoredExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scores = np.array([e.score for e in examples], dtype=np.float64)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    weights = np.array([e.weight for e in examples], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if np.any((labels != 0) & (labels != 1)):
        raise DataError("labels must be 0 or 1")
    if np.any(weights <= 0):
        raise DataError("weights must be positive")
    return scores, labels, weights


def _tie_average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks; tied scores share the mean of their rank range."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(examples: list[ScoredExample]) -> float:
    """Tie-aware rank AUC: P(score_pos > score_neg) + half the tie mass."""
    scores, labels, _ = _split(examples)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc needs at least one positive and one negative")
    ranks = _tie_average_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise(examples: list[ScoredExample]) -> float:
    """Brute-force pairwise oracle for auc."""
    scores, labels, _ = _split(examples)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("auc needs at least one positive and one negative")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def logloss(examples: list[ScoredExample]) -> float:
    """Weighted mean negative log likelihood, scores clipped away from 0/1."""
    scores, labels, weights = _split(examples)
    s = np.clip(scores, LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP)
    ll = -(labels * np.log(s) + (1 - labels) * np.log(1.0 - s))
    return float((ll * weights).sum() / weights.sum())


def _sessions(examples: list[ScoredExample]) -> dict[str, list[ScoredExample]]:
    out: dict[str, list[ScoredExample]] = {}
    for e in examples:
        if e.session_id is None:
            raise DataError("gauc_pv needs a session_id on every example")
        out.setdefault(e.session_id, []).append(e)
    return out


def gauc_pv(examples: list[ScoredExample]) -> float:
    """Impression-weighted mean of per-session AUCs.

    Sessions with a single class have no defined AUC and are excluded
    from both numerator and denominator.
    """
    num = 0.0
    den = 0.0
    for sess in _sessions(examples).values():
        labels = {e.label for e in sess}
        if labels != {0, 1}:
            continue
        num += len(sess) * auc(sess)
        den += len(sess)
    if den == 0:
        raise DataError("gauc_pv: no session contains both classes")
    return float(num / den)


def gauc_pv_pairwise(examples: list[ScoredExample]) -> float:
    """Brute-force oracle for gauc_pv using the pairwise per-session AUC."""
    num = 0.0
    den = 0.0
    for sess in _sessions(examples).values():
        labels = {e.label for e in sess}
        if labels != {0, 1}:
            continue
        num += len(sess) * auc_pairwise(sess)
        den += len(sess)
    if den == 0:
        raise DataError("gauc_pv: no session contains both classes")
    return float(num / den)


def mann_whitney_p(a: list[float] | np.ndarray, b: list[float] | np.ndarray) -> float:
    """Two-sided Mann-Whitney U p-value between two metric samples."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise DataError("mann_whitney_p needs nonempty samples")
    return float(scipy.stats.mannwhitneyu(a, b, alternative="two-sided").pvalue)


def score_dataset(scores: np.ndarray, dataset) -> list[ScoredExample]:
    labels = dataset.labels()
    return [
        ScoredExample(
            score=float(scores[i]),
            label=int(labels[i]),
            session_id=dataset.samples[i].session_id,
            weight=dataset.samples[i].weight,
        )
        for i in range(len(scores))
    ]


def report_for(scores: np.ndarray, dataset, split: str) -> MetricReport:
    """AUC and logloss, plus session AUC whenever session ids exist."""
    examples = score_dataset(scores, dataset)
    gauc = None
    if all(e.session_id is not None for e in examples):
        try:
            gauc = gauc_pv(examples)
        except DataError:
            gauc = None
    return MetricReport(
        split=split,
        n=len(examples),
        auc=auc(examples),
        logloss=logloss(examples),
        gauc_pv=gauc,
    )
