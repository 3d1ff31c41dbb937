"""Small numeric helpers shared across analyses."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def quantile7(sorted_values: np.ndarray, p: float) -> float:
    """Linear-interpolation quantile at position ``p*(n-1)`` of sorted data."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("quantile of empty data")
    h = p * (n - 1)
    lo = int(math.floor(h))
    hi = min(lo + 1, n - 1)
    return float(sorted_values[lo] + (h - lo) * (sorted_values[hi] - sorted_values[lo]))


def five_number_summary(values: Sequence[float]) -> dict[str, float]:
    x = np.sort(np.asarray(values, dtype=np.float64))
    x = x[~np.isnan(x)]
    return {
        "min": float(x[0]),
        "q1": quantile7(x, 0.25),
        "median": quantile7(x, 0.5),
        "q3": quantile7(x, 0.75),
        "max": float(x[-1]),
    }


def moments(x: np.ndarray) -> tuple[float, float]:
    """Sample skewness g1 and excess kurtosis g2 (moment estimators).

    Zero-variance data returns (0, 0).
    """
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    m2 = float(np.mean(d**2))
    if m2 == 0.0:
        return 0.0, 0.0
    m3 = float(np.mean(d**3))
    m4 = float(np.mean(d**4))
    return m3 / m2**1.5, m4 / m2**2 - 3.0


def ols_line(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares ``y = a*t + b``; returns (a, b, r2) with r2 = 0 when y is constant."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tm, ym = t.mean(), y.mean()
    dt = t - tm
    dy = y - ym
    stt = float(np.dot(dt, dt))
    if stt == 0.0:
        raise ValueError("time axis has zero variance")
    a = float(np.dot(dt, dy)) / stt
    b = float(ym - a * tm)
    syy = float(np.dot(dy, dy))
    if syy == 0.0:
        return a, b, 0.0
    resid = dy - a * dt
    r2 = 1.0 - float(np.dot(resid, resid)) / syy
    return a, b, max(0.0, min(1.0, r2))


def harmonic(n: int) -> float:
    return math.fsum(1.0 / k for k in range(1, n + 1))
