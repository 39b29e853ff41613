"""AUC and query-grouped AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties worth 0.5.

    Returns NaN when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)  # average ranks are half-integers, so the sum below is exact
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class GroupedAUC:
    value: float
    valid: int
    skipped: int


def qauc_detail(scores, labels, group_keys) -> GroupedAUC:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    keys = np.asarray(group_keys)
    if not (scores.shape == labels.shape == keys.shape):
        raise ValueError("scores, labels and group keys must share one shape")
    if scores.size == 0:
        raise ValueError("no groups to evaluate")
    order = np.argsort(keys, kind="stable")
    keys, scores, labels = keys[order], scores[order], labels[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    ends = np.r_[starts[1:], keys.size]
    values = []
    skipped = 0
    for a, b in zip(starts, ends):
        value = auc(scores[a:b], labels[a:b])
        if np.isnan(value):
            skipped += 1
        else:
            values.append(value)
    if not values:
        raise ValueError(f"no valid groups: all {skipped} groups are single-class")
    # fsum is correctly rounded, so the mean does not depend on group order
    return GroupedAUC(math.fsum(values) / len(values), len(values), skipped)


def qauc(scores, labels, group_keys) -> float:
    """Mean per-group AUC over groups holding both classes, each group weighted equally."""
    return qauc_detail(scores, labels, group_keys).value
