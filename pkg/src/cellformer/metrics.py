"""Rank-distance evaluation metrics."""

from __future__ import annotations

import math

from .errors import DataError


def _check(pred, truth):
    if len(pred) != len(truth):
        raise DataError(f"length mismatch: {len(pred)} predictions, {len(truth)} truths")
    if len(pred) == 0:
        raise DataError("metrics need at least one prediction")


def rmse(pred, truth) -> float:
    """Root mean squared rank difference."""
    _check(pred, truth)
    return math.sqrt(sum((int(p) - int(t)) ** 2 for p, t in zip(pred, truth)) / len(pred))


def mae(pred, truth) -> float:
    """Mean absolute rank difference."""
    _check(pred, truth)
    return sum(abs(int(p) - int(t)) for p, t in zip(pred, truth)) / len(pred)
