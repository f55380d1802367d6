"""Point matching, count errors and recall/precision for predicted sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)   # (pred index, gt index)
    unmatched_pred: int = 0
    unmatched_gt: int = 0
    radius: float = 16.0

    @property
    def matched(self) -> int:
        return len(self.pairs)


def match_points(pred, gt, radius=16.0) -> MatchResult:
    """Greedy one-to-one matching of same-class points.

    pred, gt: sequences of ((y, x), class).  The globally closest unmatched
    same-class pair within ``radius`` is taken first; ties break on
    (pred index, gt index).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    cands = []
    for i, ((py, px), pc) in enumerate(pred):
        for j, ((gy, gx), gc) in enumerate(gt):
            if pc != gc:
                continue
            d = math.hypot(py - gy, px - gx)
            if d <= radius:
                cands.append((d, i, j))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return MatchResult(pairs, len(pred) - len(pairs), len(gt) - len(pairs), radius)


def counting_errors(episodes) -> tuple:
    """(MAE, RMSE) over every (episode, foreground class) count error.

    episodes: iterable of (pred_counts, gt_counts), both indexed by the
    task's foreground classes.
    """
    errors = []
    for pred, gt in episodes:
        if len(pred) != len(gt):
            raise ValueError("predicted and true count vectors differ in length")
        errors.extend(p - g for p, g in zip(pred, gt))
    if not errors:
        return 0.0, 0.0
    mae = sum(abs(e) for e in errors) / len(errors)
    rmse = math.sqrt(sum(e * e for e in errors) / len(errors))
    return mae, rmse


def detection_scores(match_results) -> tuple:
    """Pooled (recall, precision); a zero denominator yields 0."""
    matched = n_gt = n_pred = 0
    for m in match_results:
        matched += m.matched
        n_gt += m.matched + m.unmatched_gt
        n_pred += m.matched + m.unmatched_pred
    recall = matched / n_gt if n_gt else 0.0
    precision = matched / n_pred if n_pred else 0.0
    return recall, precision


def class_counts(items, num_classes: int) -> list:
    counts = [0] * num_classes
    for _, c in items:
        if 0 <= c < num_classes:
            counts[c] += 1
    return counts
