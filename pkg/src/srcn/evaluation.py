"""Forecast error metrics and naive baselines."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import BinnedSeries, SampleWindow
from .grid_codec import NetworkMap


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise ValueError(f"prediction shape {p.shape} != actual shape {a.shape}")
    if p.size == 0:
        raise ValueError("empty inputs")
    return p, a


def mape(pred, actual, epsilon: float = 1.0) -> float:
    """Mean of |pred - actual| / max(|actual|, epsilon)."""
    p, a = _pair(pred, actual)
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    denom = np.maximum(np.abs(a), epsilon)
    if (denom == 0).any():
        raise ZeroDivisionError("zero actual value with epsilon = 0")
    return float(np.mean(np.abs(p - a) / denom))


def mape_signed(pred, actual, epsilon: float = 1.0) -> float:
    """Signed mean of (pred - actual) / pred, the predicted value as denominator.

    Predicted values smaller than ``epsilon`` in magnitude are replaced by
    ``epsilon`` in the denominator.
    """
    p, a = _pair(pred, actual)
    denom = np.where(np.abs(p) < epsilon, epsilon, p)
    if (denom == 0).any():
        raise ZeroDivisionError("zero prediction with epsilon = 0")
    return float(np.mean((p - a) / denom))


def rmse(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def persistence_baseline(window: SampleWindow, net: NetworkMap, v_max: float) -> np.ndarray:
    """Last input frame's decoded link speeds, repeated for every offset -> [K, n] km/h."""
    last = net.decode_many(window.inputs[-1:], v_max)[0]
    return np.repeat(last[None, :], len(window.offsets), axis=0)


class HistoricalAverage:
    """Per-link mean speed at each bin of the service day over the training days."""

    def __init__(self, series: BinnedSeries, days: Sequence[int] | None = None):
        days = list(range(series.n_days)) if days is None else list(days)
        if len(days) < 2:
            raise ValueError("historical average needs at least 2 training days")
        self.table = series.values[days].mean(axis=0)  # [bins, links]

    def predict(self, bin_of_day: int) -> np.ndarray:
        if not 0 <= bin_of_day < self.table.shape[0]:
            raise KeyError(f"bin {bin_of_day} was not seen in training")
        return self.table[bin_of_day].copy()

    def predict_window(self, window: SampleWindow) -> np.ndarray:
        return np.stack([self.predict(b) for b in window.target_bins])


def historical_average_baseline(series: BinnedSeries, days: Sequence[int] | None = None) -> HistoricalAverage:
    return HistoricalAverage(series, days)
