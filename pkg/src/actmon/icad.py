"""Inductive conformal anomaly detection over interval-abstraction scores.

The nonconformity of an activation vector is the fraction of monitored
neurons that fall outside their fitted intervals; it grows for anomalous
inputs. The inductive scheme fits the abstraction on a proper training set,
scores a held-out calibration set once, and then assigns any test vector the
p-value

    p = |{calibration scores >= test score}| / |calibration set|

with ties counting towards the numerator. A small p-value means few
in-distribution samples look as strange as the test input.

``cad_p_value`` implements the non-inductive scheme, which refits the
abstraction once per training sample (leave-one-out) and compares those
scores against the test score computed on the full set. It is quadratic and
kept only as a correctness oracle; nothing on the runtime path uses it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abstraction import (
    CLASS_AGNOSTIC,
    GaussianAbstraction,
    fit,
    outside_fraction,
    outside_fractions,
)
from .traces import TraceDataset


@dataclass(frozen=True)
class CalibrationScores:
    """Sorted ascending nonconformity scores of the calibration set."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.shape[0] == 0:
            raise ValueError("calibration scores must be a non-empty 1-D array")
        if not np.isfinite(scores).all():
            raise ValueError("calibration scores must be finite")
        if (np.diff(scores) < 0.0).any():
            raise ValueError("calibration scores must be sorted ascending")
        object.__setattr__(self, "scores", scores)

    @property
    def size(self) -> int:
        return self.scores.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CalibrationScores):
            return NotImplemented
        return np.array_equal(self.scores, other.scores)


@dataclass(frozen=True)
class PValue:
    """Exact-count p-value: value == numerator / denominator."""

    value: float
    numerator: int
    denominator: int

    def __post_init__(self) -> None:
        if not 0 <= self.numerator <= self.denominator:
            raise ValueError("p-value counts out of range")
        if self.value != self.numerator / self.denominator:
            raise ValueError("p-value does not reconstruct from its counts")


def nonconformity(
    abstraction: GaussianAbstraction, x, class_label: int | None = None
) -> float:
    """Nonconformity score of one activation vector: its outside fraction."""
    return outside_fraction(abstraction, x, class_label)


def calibrate(abstraction: GaussianAbstraction, calibration: TraceDataset) -> CalibrationScores:
    """Score every calibration record and sort; the ICAD reference distribution."""
    if len(calibration) == 0:
        raise ValueError("calibration set must be non-empty")
    return CalibrationScores(np.sort(outside_fractions(abstraction, calibration)))


def p_value(calibration: CalibrationScores, score: float) -> PValue:
    """Fraction of calibration scores >= the test score (ties count).

    Binary search over the sorted scores; equals the direct linear count
    exactly, which the test suite enforces.
    """
    n = calibration.size
    numerator = n - int(np.searchsorted(calibration.scores, score, side="left"))
    return PValue(value=numerator / n, numerator=numerator, denominator=n)


def cad_p_value(training: TraceDataset, x, width_multiplier: float = 2.0) -> PValue:
    """Non-inductive conformal p-value by leave-one-out refitting.

    For every training record, the abstraction is refitted on the remaining
    records and the held-out record scored against it; the p-value counts
    how many of those scores reach the test score computed against the full
    training set. The two sides use different reference sets on purpose:
    this mirrors the scheme as published, and it exists purely as an oracle
    for the inductive implementation.

    Quadratic in the training size. Requires >= 3 records so each refit
    still has the 2 samples a deviation needs.
    """
    n = len(training)
    if n < 3:
        raise ValueError(f"need >= 3 training records for leave-one-out refits, got {n}")
    full = fit(training, CLASS_AGNOSTIC, width_multiplier)
    reference = outside_fraction(full, x)
    numerator = 0
    for i in range(n):
        rest = training.subset(np.concatenate([np.arange(i), np.arange(i + 1, n)]))
        refit = fit(rest, CLASS_AGNOSTIC, width_multiplier)
        if outside_fraction(refit, training.activations[i]) >= reference:
            numerator += 1
    return PValue(value=numerator / n, numerator=numerator, denominator=n)
