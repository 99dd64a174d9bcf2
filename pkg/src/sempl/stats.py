"""Accuracy metric and the Scott-Knott ranking used to compare treatments.

Lower MRE is better everywhere in this module, so rank 1 is the group with
the smallest mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def mre(actuals, predictions) -> float:
    """Mean relative error, in percent."""
    a = np.asarray(actuals, dtype=float).reshape(-1)
    p = np.asarray(predictions, dtype=float).reshape(-1)
    if len(a) != len(p):
        raise ValueError(f"length mismatch: {len(a)} actuals vs {len(p)} predictions")
    if len(a) == 0:
        raise ValueError("mre needs at least one value")
    if np.any(a == 0):
        raise ValueError("mre is undefined for a zero actual value")
    return float(np.mean(np.abs(a - p) / np.abs(a)) * 100.0)


def a12(xs, ys) -> float:
    """Vargha-Delaney effect size: P(x > y) + 0.5 * P(x == y)."""
    x = np.asarray(xs, dtype=float).reshape(-1)
    y = np.sort(np.asarray(ys, dtype=float).reshape(-1))
    if len(x) == 0 or len(y) == 0:
        raise ValueError("a12 needs two nonempty samples")
    below = np.searchsorted(y, x, side="left")
    upto = np.searchsorted(y, x, side="right")
    return float((below.sum() + 0.5 * (upto - below).sum()) / (len(x) * len(y)))


def split_delta(means: Sequence[float], cut: int) -> float:
    """Between-group spread when ``means`` is cut into ``means[:cut]`` and ``means[cut:]``."""
    m = np.asarray(means, dtype=float)
    if not 1 <= cut < len(m):
        raise ValueError(f"cut must be in [1, {len(m) - 1}], got {cut}")
    left, right = m[:cut], m[cut:]
    mu = m.mean()
    return float(len(left) / len(m) * (left.mean() - mu) ** 2
                 + len(right) / len(m) * (right.mean() - mu) ** 2)


def bootstrap_different(better, worse, confidence=0.99, iters=1000, rng=None) -> bool:
    """Two-sample bootstrap test on the difference of means.

    Both samples are shifted to the pooled mean to form the null, resampled with
    replacement ``iters`` times, and the observed difference is significant when
    it falls outside the central ``confidence`` band of the null differences.
    """
    rng = np.random.default_rng(rng)
    b = np.asarray(better, dtype=float)
    w = np.asarray(worse, dtype=float)
    observed = w.mean() - b.mean()
    pooled = np.concatenate([b, w]).mean()
    b0 = b - b.mean() + pooled
    w0 = w - w.mean() + pooled
    nb = b0[rng.integers(0, len(b0), size=(iters, len(b0)))].mean(axis=1)
    nw = w0[rng.integers(0, len(w0), size=(iters, len(w0)))].mean(axis=1)
    null = nw - nb
    alpha = 1.0 - confidence
    lo, hi = np.quantile(null, [alpha / 2, 1 - alpha / 2])
    return bool(observed < lo or observed > hi)


@dataclass(frozen=True)
class MreSeries:
    label: str
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in np.asarray(self.values, dtype=float).reshape(-1))
        if not vals:
            raise ValueError(f"series {self.label!r} is empty")
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"series {self.label!r} must hold finite, nonnegative values")
        object.__setattr__(self, "values", vals)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class RankResult:
    ranks: dict
    groups: list = field(default_factory=list)
    means: dict = field(default_factory=dict)

    def to_dict(self):
        return {"ranks": dict(self.ranks), "groups": [list(g) for g in self.groups],
                "means": dict(self.means)}


def scott_knott(series, confidence=0.99, effect_threshold=0.6, bootstrap_iters=1000,
                trivial=0.1, seed=0) -> RankResult:
    """Rank treatments into statistically distinct groups.

    Treatments are sorted by mean (ties by label) and recursively cut where the
    between-group spread is largest. A cut is kept only if the two sides differ by
    the bootstrap test at ``confidence``, the effect size Â12(worse, better) is at
    least ``effect_threshold``, and their means differ by more than ``trivial``
    times the standard deviation of all values pooled together.

    Randomness for each cut is keyed by (seed, depth, position in the sorted
    list), so the result does not depend on the input order.
    """
    items = [s if isinstance(s, MreSeries) else MreSeries(*s) for s in series]
    if not items:
        raise ValueError("scott_knott needs at least one series")
    labels = [s.label for s in items]
    if len(set(labels)) != len(labels):
        raise ValueError("series labels must be unique")
    items.sort(key=lambda s: (s.mean, s.label))
    spread = float(np.std(np.concatenate([s.values for s in items])))
    groups = []

    def recurse(lo, hi, depth):
        part = items[lo:hi]
        if len(part) < 2:
            groups.append(part)
            return
        means = [s.mean for s in part]
        deltas = [split_delta(means, c) for c in range(1, len(part))]
        cut = int(np.argmax(deltas)) + 1
        better = np.concatenate([s.values for s in part[:cut]])
        worse = np.concatenate([s.values for s in part[cut:]])
        rng = np.random.default_rng([seed & 0xFFFFFFFF, depth, lo])
        split = (worse.mean() - better.mean() > trivial * spread
                 and a12(worse, better) >= effect_threshold
                 and bootstrap_different(better, worse, confidence, bootstrap_iters, rng))
        if split:
            recurse(lo, lo + cut, depth + 1)
            recurse(lo + cut, hi, depth + 1)
        else:
            groups.append(part)

    recurse(0, len(items), 0)
    ranks = {}
    for r, group in enumerate(groups, start=1):
        for s in group:
            ranks[s.label] = r
    return RankResult(ranks=ranks, groups=[[s.label for s in g] for g in groups],
                      means={s.label: s.mean for s in items})
