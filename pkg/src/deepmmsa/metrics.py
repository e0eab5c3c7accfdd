"""Censoring-aware evaluation metrics.

Predictions are survival times on the label scale: larger means the patient is
expected to live longer. Risk scores (larger = worse) must be negated first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has an empty denominator."""


@dataclass(frozen=True)
class EvalSample:
    predicted: float
    time: float
    event: int

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time < 0:
            raise ValueError(f"time must be finite and non-negative, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event}")


def _arrays(predicted, times, events):
    p = np.asarray(predicted, dtype=np.float64).ravel()
    t = np.asarray(times, dtype=np.float64).ravel()
    e = np.asarray(events).ravel()
    if not (p.shape == t.shape == e.shape):
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} times, {e.size} events")
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise ValueError("times must be finite and non-negative")
    if not np.all((e == 0) | (e == 1)):
        raise ValueError("events must be 0 or 1")
    return p, t, e.astype(bool)


def concordance_counts(predicted, times, events) -> tuple[int, int]:
    """Return (concordant, comparable) pair counts.

    A pair (i, j) is comparable when i had the event and ``t_i < t_j``; it is
    concordant when additionally ``pred_i < pred_j``. Ties never count.
    """
    p, t, e = _arrays(predicted, times, events)
    order = np.argsort(t, kind="stable")
    p, t, e = p[order], t[order], e[order]
    concordant = comparable = 0
    n = t.size
    # later[i:] holds every j with t_j >= t_i; skip the block tied with t_i
    for i in np.flatnonzero(e):
        k = np.searchsorted(t, t[i], side="right")
        if k >= n:
            continue
        later = p[k:]
        comparable += n - k
        concordant += int(np.count_nonzero(p[i] < later))
    return concordant, comparable


def c_index(predicted, times, events) -> float:
    """Fraction of comparable pairs whose predicted order matches the observed order."""
    concordant, comparable = concordance_counts(predicted, times, events)
    if comparable == 0:
        raise UndefinedMetricError("undefined concordance: no comparable pairs "
                                   "(need an event time strictly earlier than another time)")
    return concordant / comparable


def mae_uncensored(predicted, times, events) -> float:
    """Mean absolute error over samples whose event was observed."""
    p, t, e = _arrays(predicted, times, events)
    if not e.any():
        raise UndefinedMetricError("undefined MAE: every sample is censored")
    return float(np.abs(t[e] - p[e]).sum() / e.sum())


def from_samples(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a sequence of :class:`EvalSample` into prediction, time and event arrays."""
    samples = list(samples)
    return (np.array([s.predicted for s in samples], dtype=np.float64),
            np.array([s.time for s in samples], dtype=np.float64),
            np.array([s.event for s in samples], dtype=np.int64))
