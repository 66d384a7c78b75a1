"""Threshold-swept F1/precision/recall, average precision and per-type subsets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import threshold_grid

# utterance-level disfluency types
UTTERANCE_TYPES = ("block", "interjection", "prolongation", "sound_repetition", "word_repetition")
# clinical stutter codes used at the word level
STUTTER_CODES = ("prolongation", "epenthesis", "broken_word", "block", "sound_syllable_repetition")
KNOWN_TYPES = frozenset(UTTERANCE_TYPES) | frozenset(STUTTER_CODES)


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    partitions: tuple[str, ...] | None = None
    types: tuple[frozenset, ...] | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float).reshape(-1)
        labels = np.asarray(self.labels).astype(bool).reshape(-1)
        if scores.shape != labels.shape:
            raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
        if scores.size and (scores.min() < 0 or scores.max() > 1):
            raise ValueError("scores must lie in [0, 1]")
        for name in ("partitions", "types"):
            tags = getattr(self, name)
            if tags is not None and len(tags) != len(scores):
                raise ValueError(f"{name} length differs from scores")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        if self.types is not None:
            object.__setattr__(self, "types", tuple(frozenset(t) for t in self.types))

    def __len__(self):
        return len(self.scores)

    def subset(self, mask) -> "ScoredSet":
        mask = np.asarray(mask, dtype=bool)
        pick = lambda tags: None if tags is None else tuple(t for t, m in zip(tags, mask) if m)
        return ScoredSet(self.scores[mask], self.labels[mask], pick(self.partitions), pick(self.types))


def confusion_at_threshold(scored: ScoredSet, threshold: float) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) with the rule: predicted positive iff score >= threshold."""
    pred = scored.scores >= threshold
    y = scored.labels
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    return tp, fp, fn, tn


def f1_precision_recall(counts: Sequence[int]) -> tuple[float, float, float]:
    tp, fp, fn = counts[0], counts[1], counts[2]
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return f1, p, r


@dataclass(frozen=True)
class SweepResult:
    threshold: float
    f1: float
    precision: float
    recall: float
    curve: tuple[tuple[float, float, float, float], ...] = field(repr=False, default=())

    def as_dict(self) -> dict[str, float]:
        return {"threshold": self.threshold, "f1": self.f1, "precision": self.precision, "recall": self.recall}


def sweep_thresholds(scored: ScoredSet, grid=None) -> SweepResult:
    """Best F1 over the grid; ties go to the smallest threshold."""
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty threshold grid")
    curve = []
    best = None
    for theta in grid:
        f1, p, r = f1_precision_recall(confusion_at_threshold(scored, theta))
        curve.append((float(theta), f1, p, r))
        if best is None or f1 > best[1]:
            best = curve[-1]
    return SweepResult(best[0], best[1], best[2], best[3], tuple(curve))


def average_precision(scored: ScoredSet) -> float:
    """Mean precision at the rank of each positive (descending score, stable order)."""
    n_pos = int(scored.labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    order = np.argsort(-scored.scores, kind="stable")
    hits = scored.labels[order]
    ranks = np.arange(1, len(hits) + 1)
    precision_at = np.cumsum(hits) / ranks
    return float(precision_at[hits].sum() / n_pos)


def type_subset(scored: ScoredSet, stutter_type: str) -> ScoredSet:
    """Items tagged with ``stutter_type`` (as positives) plus untagged fluent items."""
    if stutter_type not in KNOWN_TYPES:
        raise ValueError(f"unknown stutter type {stutter_type!r}")
    if scored.types is None:
        raise ValueError("scored set carries no type tags")
    has_type = np.array([stutter_type in t for t in scored.types], dtype=bool)
    fluent = np.array([not t for t in scored.types], dtype=bool)
    sub = scored.subset(has_type | fluent)
    return ScoredSet(sub.scores, np.array([stutter_type in t for t in sub.types], dtype=bool),
                     sub.partitions, sub.types)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    data: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(_round_floats(self.data), indent=2, sort_keys=True) + "\n"

    def __getitem__(self, key):
        return self.data[key]


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, 10)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def _sweep_block(scored: ScoredSet, grid) -> dict[str, Any]:
    res = sweep_thresholds(scored, grid)
    block = res.as_dict()
    block["count"] = len(scored)
    block["positives"] = int(scored.labels.sum())
    return block


def build_report(word_set: ScoredSet | None = None, utterance_set: ScoredSet | None = None,
                 config=None, grid=None) -> MetricsReport:
    """Per-partition word sweeps with global AP, and per-type utterance sweeps.

    Per-type F1 is reported at its own optimal threshold and, alongside, at
    the threshold that is optimal on the whole utterance set.
    """
    if (word_set is None or len(word_set) == 0) and (utterance_set is None or len(utterance_set) == 0):
        raise ValueError("nothing to report: no scored words or utterances")
    if grid is None:
        grid = config.threshold_grid() if config is not None else threshold_grid()
    grid = np.asarray(grid, dtype=float)
    data: dict[str, Any] = {"thresholds": len(grid)}
    if config is not None:
        data["config"] = config.to_dict()

    if word_set is not None and len(word_set):
        words: dict[str, Any] = {"all": _sweep_block(word_set, grid)}
        words["all"]["average_precision"] = average_precision(word_set) if word_set.labels.any() else None
        if word_set.partitions is not None:
            parts = {}
            for name in sorted(set(word_set.partitions)):
                sub = word_set.subset([p == name for p in word_set.partitions])
                parts[name] = _sweep_block(sub, grid)
            words["partitions"] = parts
        data["word"] = words

    if utterance_set is not None and len(utterance_set):
        overall = sweep_thresholds(utterance_set, grid)
        utts: dict[str, Any] = {"all": _sweep_block(utterance_set, grid)}
        if utterance_set.types is not None:
            per_type = {}
            for t in UTTERANCE_TYPES:
                sub = type_subset(utterance_set, t)
                block = _sweep_block(sub, grid)
                f1, p, r = f1_precision_recall(confusion_at_threshold(sub, overall.threshold))
                block["global_threshold_f1"] = f1
                block["negatives_only"] = not sub.labels.any()
                per_type[t] = block
            utts["types"] = per_type
        data["utterance"] = utts
    return MetricsReport(data)
