"""Trend fitting, forecasting with a ±2σ band, threshold crossings and scaling advice."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .base import AnalysisModule, ModuleDescriptor, ModuleResult, ParamSpec, narrative, select_metrics
from .errors import AllMissing, InvalidParameter, TooShort
from .preprocess import Experiment, MetricSeries, fill_gaps
from .stats import ols_line

MODELS = ("linear", "holt")
DIRECTIONS = ("above", "below")
MIN_SAMPLES = 10
BAND_SIGMAS = 2.0
DEFAULT_CPU_THRESHOLD = 90.0


@dataclass
class TrendFit:
    model: str
    params: dict[str, float]
    residual_std: float
    n: int
    t0: int = 0
    dt: int = 1

    def predict(self, steps: np.ndarray) -> np.ndarray:
        """Point forecast ``steps`` samples past the last observation."""
        if self.model == "linear":
            idx = (self.n - 1) + steps
            return self.params["slope"] * idx + self.params["intercept"]
        return self.params["level"] + steps * self.params["trend"]


@dataclass
class Forecast:
    metric: str
    fit: TrendFit
    horizon: int
    point: np.ndarray
    low: np.ndarray
    high: np.ndarray

    def time_of(self, index: int) -> int:
        return self.fit.t0 + (self.fit.n + index) * self.fit.dt


@dataclass(frozen=True)
class Crossing:
    threshold: float
    direction: str
    index: int | None
    predicted_time: int | None
    confidence: str  # certain | band_overlap | none


@dataclass(frozen=True)
class Recommendation:
    rule: str
    values: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"rule": self.rule, "values": self.values}


def holt_filter(x: np.ndarray, alpha: float, beta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Double exponential smoothing.

    Returns levels, trends and one-step-ahead forecasts, where ``forecasts[t]``
    predicts ``x[t]`` from state at ``t-1`` (``forecasts[0]`` is NaN).
    Initialization: level = x[0], trend = x[1] - x[0].
    """
    n = len(x)
    level = np.empty(n)
    trend = np.empty(n)
    ahead = np.full(n, np.nan)
    level[0] = x[0]
    trend[0] = x[1] - x[0]
    for t in range(1, n):
        ahead[t] = level[t - 1] + trend[t - 1]
        level[t] = alpha * x[t] + (1 - alpha) * (level[t - 1] + trend[t - 1])
        trend[t] = beta * (level[t] - level[t - 1]) + (1 - beta) * trend[t - 1]
    return level, trend, ahead


def fit_trend(
    series: MetricSeries | Sequence[float],
    model: str = "linear",
    holt_alpha: float = 0.5,
    holt_beta: float = 0.3,
) -> TrendFit:
    """Fit a linear (OLS over sample index) or Holt trend.

    ``residual_std`` is the root-mean-square in-sample one-step error (OLS
    residuals for the linear model; Holt errors from the third sample on,
    since the second is matched exactly by construction).
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    if isinstance(series, MetricSeries):
        x, t0, dt = series.values, series.t0, series.dt
    else:
        x, t0, dt = np.asarray(series, dtype=np.float64), 0, 1
    n = len(x)
    if n < MIN_SAMPLES:
        raise TooShort(f"trend fitting needs at least {MIN_SAMPLES} samples, got {n}")
    if np.isnan(x).any():
        raise ValueError("series has gaps; fill them first")
    if model == "linear":
        t = np.arange(n, dtype=np.float64)
        slope, intercept, r2 = ols_line(t, x)
        resid = x - (slope * t + intercept)
        rmse = float(np.sqrt(np.mean(resid**2)))
        return TrendFit("linear", {"slope": slope, "intercept": intercept, "r2": r2}, rmse, n, t0, dt)
    if not (0 < holt_alpha <= 1 and 0 <= holt_beta <= 1):
        raise ValueError("holt_alpha must be in (0, 1] and holt_beta in [0, 1]")
    level, trend, ahead = holt_filter(x, holt_alpha, holt_beta)
    errors = x[2:] - ahead[2:]
    rmse = float(np.sqrt(np.mean(errors**2)))
    return TrendFit(
        "holt",
        {"level": float(level[-1]), "trend": float(trend[-1]), "alpha": holt_alpha, "beta": holt_beta},
        rmse, n, t0, dt,
    )


def forecast(fitted: TrendFit, horizon: int, metric: str = "") -> Forecast:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    steps = np.arange(1, horizon + 1, dtype=np.float64)
    point = fitted.predict(steps)
    half = BAND_SIGMAS * fitted.residual_std
    return Forecast(metric, fitted, horizon, point, point - half, point + half)


def _first(mask: np.ndarray) -> int | None:
    hits = np.flatnonzero(mask)
    return int(hits[0]) if len(hits) else None


def threshold_crossing(fc: Forecast, threshold: float, direction: str = "above") -> Crossing:
    """Earliest forecast step reaching the threshold.

    ``certain`` if the point forecast reaches it, ``band_overlap`` if only the
    band does, ``none`` otherwise.  ``above`` means value >= threshold.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if direction == "above":
        point_hit, band_hit = fc.point >= threshold, fc.high >= threshold
    else:
        point_hit, band_hit = fc.point <= threshold, fc.low <= threshold
    idx = _first(point_hit)
    if idx is not None:
        return Crossing(threshold, direction, idx, fc.time_of(idx), "certain")
    idx = _first(band_hit)
    if idx is not None:
        return Crossing(threshold, direction, idx, fc.time_of(idx), "band_overlap")
    return Crossing(threshold, direction, None, None, "none")


def utilization_stats(values: np.ndarray, thresholds: Sequence[tuple[float, str]] = ()) -> dict[str, Any]:
    x = np.asarray(values, dtype=np.float64)
    stats = {
        "mean": float(x.mean()),
        "max": float(x.max()),
        "min": float(x.min()),
        "p95": float(np.percentile(x, 95)),
    }
    violations = 0
    for value, direction in thresholds:
        violations += int(np.sum(x >= value) if direction == "above" else np.sum(x <= value))
    stats["historical_violations"] = violations
    return stats


def recommend(
    metric: str,
    utilization: dict[str, Any],
    crossings: Sequence[Crossing],
    idle_threshold: float = 10.0,
) -> Recommendation:
    """Rule table: SCALE_UP > MONITOR > DOWNSCALE_CANDIDATE > NO_ACTION."""
    certain = [c for c in crossings if c.confidence == "certain"]
    if certain:
        c = min(certain, key=lambda c: (c.index, c.threshold))
        return Recommendation("SCALE_UP", {"metric": metric, "deadline": c.predicted_time,
                                           "threshold": c.threshold, "direction": c.direction})
    overlap = [c for c in crossings if c.confidence == "band_overlap"]
    if overlap:
        c = min(overlap, key=lambda c: (c.index, c.threshold))
        return Recommendation("MONITOR", {"metric": metric, "near": c.predicted_time,
                                          "threshold": c.threshold, "direction": c.direction})
    if utilization.get("mean", float("inf")) < idle_threshold:
        return Recommendation("DOWNSCALE_CANDIDATE", {"metric": metric,
                                                      "mean": utilization["mean"]})
    return Recommendation("NO_ACTION", {"metric": metric})


_THRESHOLD_RE = re.compile(r"^\s*([^<>]+?)\s*([<>])\s*([-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*$")


def parse_threshold(text: str) -> tuple[str, float, str]:
    """``"cpu>90"`` -> ("cpu", 90.0, "above"); ``"free_mem<10"`` -> below."""
    m = _THRESHOLD_RE.match(text)
    if m is None:
        raise ValueError(f"threshold {text!r} is not of the form metric>value or metric<value")
    return m.group(1), float(m.group(3)), "above" if m.group(2) == ">" else "below"


class CapacityModule(AnalysisModule):
    """Capacity planning per metric.

    Confidence is the mean fit quality ``1 - residual_std / std(series)``
    (clamped to [0, 1]; a constant series counts as perfectly fitted).
    """

    descriptor = ModuleDescriptor(
        name="capacity",
        version="1.0.0",
        produces="capacity",
        summary="Projects metrics forward and warns about threshold crossings.",
        parameter_schema=(
            ParamSpec("metrics", "list", [], "Metrics to forecast (empty = all)."),
            ParamSpec("model", "enum", "linear", "Trend model.", choices=MODELS),
            ParamSpec("horizon", "int", None, "Forecast horizon in samples (default n/4).",
                      nullable=True),
            ParamSpec("holt_alpha", "float", 0.5, "Holt level smoothing."),
            ParamSpec("holt_beta", "float", 0.3, "Holt trend smoothing."),
            ParamSpec("thresholds", "list", [],
                      "Thresholds as 'metric>value' or 'metric<value'."),
            ParamSpec("cpu_threshold", "float", DEFAULT_CPU_THRESHOLD,
                      "Default 'above' threshold for metrics named like cpu without one."),
            ParamSpec("idle_threshold", "float", 10.0, "Mean below this suggests downscaling."),
            ParamSpec("gap_policy", "enum", "ffill", "Gap filling before fitting.",
                      choices=("ffill", "linear", "zero")),
        ),
    )

    def analyze(self, experiment: Experiment, params: dict[str, Any]) -> ModuleResult:
        names = select_metrics(experiment, params["metrics"])
        table: dict[str, list[tuple[float, str]]] = {}
        for item in params["thresholds"]:
            try:
                metric, value, direction = parse_threshold(str(item))
            except ValueError as exc:
                raise InvalidParameter("thresholds", str(exc)) from None
            table.setdefault(metric, []).append((value, direction))
        forecasts = []
        skipped = []
        story = []
        actions = []
        quality = []
        for m in names:
            try:
                s = fill_gaps(experiment.series[m], params["gap_policy"])
                fit = fit_trend(s, params["model"], params["holt_alpha"], params["holt_beta"])
            except (AllMissing, TooShort) as exc:
                skipped.append({"metric": m, "reason": str(exc)})
                continue
            horizon = params["horizon"] or max(1, len(s) // 4)
            fc = forecast(fit, horizon, m)
            thresholds = table.get(m)
            if thresholds is None and "cpu" in m.lower():
                thresholds = [(params["cpu_threshold"], "above")]
            thresholds = thresholds or []
            crossings = [threshold_crossing(fc, v, d) for v, d in thresholds]
            util = utilization_stats(s.values, thresholds)
            rec = recommend(m, util, crossings, params["idle_threshold"])
            sd = float(np.std(s.values))
            quality.append(1.0 if sd == 0 else max(0.0, min(1.0, 1.0 - fit.residual_std / sd)))
            forecasts.append({
                "metric": m,
                "model": fit.model,
                "horizon": horizon,
                "fitted_params": fit.params,
                "residual_std": fit.residual_std,
                "point_forecast": fc.point.tolist(),
                "band_low": fc.low.tolist(),
                "band_high": fc.high.tolist(),
                "forecast_t0": fc.time_of(0),
                "thresholds": [{"value": v, "direction": d} for v, d in thresholds],
                "crossings": [
                    {"threshold": c.threshold, "direction": c.direction, "index": c.index,
                     "predicted_time": c.predicted_time, "confidence": c.confidence}
                    for c in crossings
                ],
                "utilization": util,
                "recommendation": rec.to_dict(),
            })
            if rec.rule != "NO_ACTION":
                actions.append(rec.to_dict())
            for c in crossings:
                if c.confidence != "none":
                    story.append(narrative(
                        "capacity.crossing", metric=m, threshold=c.threshold,
                        direction=c.direction, ts=c.predicted_time, confidence=c.confidence,
                    ))
            if util["historical_violations"]:
                story.append(narrative("capacity.violations", metric=m,
                                       count=util["historical_violations"]))
            story.append(narrative("capacity.utilization", metric=m, mean=util["mean"],
                                   peak=util["max"], slope=self._slope(fit)))
        if not forecasts:
            story.append(narrative("capacity.none", metrics=0))
        return ModuleResult(
            {"forecasts": forecasts, "skipped": skipped, "recommendations": actions},
            float(np.mean(quality)) if quality else 0.0,
            story,
        )

    @staticmethod
    def _slope(fit: TrendFit) -> float:
        return fit.params["slope"] if fit.model == "linear" else fit.params["trend"]
