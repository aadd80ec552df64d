"""Count-accuracy and evidence-completeness metrics."""

from __future__ import annotations

import statistics
from typing import Iterable, Sequence

from .errors import ValidationError

DEFAULT_EPSILON = 1e-9


def _check_count(value: int, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value


def ace(predicted: int, gold: int) -> int:
    """Absolute count error |predicted - gold|."""
    return abs(_check_count(predicted, "predicted") - _check_count(gold, "gold"))


def nace(predicted: int, gold: int, epsilon: float = DEFAULT_EPSILON) -> float:
    """Count error normalized by the gold count; exceeds 1.0 when the
    prediction is off by more than the true count.

    epsilon stands in for a zero gold count so the ratio stays finite; a
    positive gold count is used as-is, keeping small-count ratios exact.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be > 0, got {epsilon}")
    return ace(predicted, gold) / max(_check_count(gold, "gold"), epsilon)


def chunk_recall(retained: Iterable[str], gold_evidence: Iterable[str]) -> float:
    """Fraction of gold evidence chunks present in the retained set."""
    gold = set(gold_evidence)
    if not gold:
        raise ValidationError("chunk_recall is undefined for empty gold evidence")
    return len(set(retained) & gold) / len(gold)


def micro_chunk_recall(pairs: Sequence[tuple[Iterable[str], Iterable[str]]]) -> float:
    """Pooled recall across queries: total hits over total gold chunks.

    Each pair is (retained, gold_evidence). The macro alternative averages
    chunk_recall per query instead.
    """
    hit = 0
    total = 0
    for retained, gold_evidence in pairs:
        gold = set(gold_evidence)
        if not gold:
            raise ValidationError("micro_chunk_recall is undefined for empty gold evidence")
        hit += len(set(retained) & gold)
        total += len(gold)
    if total == 0:
        raise ValidationError("micro_chunk_recall needs at least one query")
    return hit / total


def mean(values: Sequence[float]) -> float:
    if not values:
        raise ValidationError("mean of an empty sequence is undefined")
    return statistics.fmean(values)


def median(values: Sequence[float]) -> float:
    """Standard median: midpoint mean for even-length inputs."""
    if not values:
        raise ValidationError("median of an empty sequence is undefined")
    return statistics.median(values)
