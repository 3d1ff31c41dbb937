"""Anomaly detection: z-score, IQR fences, isolation forest and PCA-combined scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .base import (
    AnalysisModule,
    ModuleDescriptor,
    ModuleResult,
    ParamSpec,
    narrative,
    select_metrics,
)
from .errors import AllMissing, DegenerateInput, TooShort
from .preprocess import GAP_POLICIES, Experiment, MetricSeries, fill_gaps
from .stats import harmonic, moments, quantile7

logger = logging.getLogger(__name__)

DETECTORS = ("zscore", "iqr", "isolation_forest")


@dataclass
class AnomalyFinding:
    metric: str
    indices: list[int]
    timestamps: list[int]
    scores: list[float]
    detector: str
    threshold_used: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "detector": self.detector,
            "threshold_used": self.threshold_used,
            "indices": self.indices,
            "timestamps": self.timestamps,
            "scores": self.scores,
        }


@dataclass
class CombinedAnomalyFinding:
    metrics: list[str]
    dropped: list[str]
    components: int
    timestamps: list[int]
    combined_scores: list[float]
    top_k: list[int]
    threshold: float = 3.0
    explained_variance: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "metrics": self.metrics,
            "dropped": self.dropped,
            "components": self.components,
            "threshold": self.threshold,
            "explained_variance": self.explained_variance,
            "top_k": self.top_k,
            "top_k_timestamps": [self.timestamps[i] for i in self.top_k],
            "combined_scores": self.combined_scores,
        }


def _unpack(series: MetricSeries | Sequence[float] | np.ndarray) -> tuple[str, np.ndarray, int, int]:
    if isinstance(series, MetricSeries):
        return series.name, series.values, series.t0, series.dt
    return "", np.asarray(series, dtype=np.float64), 0, 1


def _finding(name, idx, scores, detector, threshold, t0, dt) -> AnomalyFinding:
    idx = np.asarray(idx, dtype=np.int64)
    return AnomalyFinding(
        metric=name,
        indices=idx.tolist(),
        timestamps=(t0 + idx * dt).tolist(),
        scores=np.asarray(scores, dtype=np.float64).tolist(),
        detector=detector,
        threshold_used=float(threshold),
    )


def zscore_detect(series, threshold: float = 3.0) -> AnomalyFinding:
    """Flag samples whose population z-score magnitude exceeds ``threshold``."""
    name, x, t0, dt = _unpack(series)
    if len(x) == 0:
        return _finding(name, [], [], "zscore", threshold, t0, dt)
    mean = x.mean()
    std = x.std()
    if std == 0.0 or not np.isfinite(std):
        return _finding(name, [], [], "zscore", threshold, t0, dt)
    z = np.abs(x - mean) / std
    idx = np.flatnonzero(z > threshold)
    return _finding(name, idx, z[idx], "zscore", threshold, t0, dt)


def iqr_detect(series, k: float = 1.5) -> AnomalyFinding:
    """Tukey fences with type-7 quartiles; score is distance past the fence in IQRs."""
    name, x, t0, dt = _unpack(series)
    if len(x) < 4:
        raise TooShort(f"IQR detection needs at least 4 samples, got {len(x)}")
    s = np.sort(x)
    q1, q3 = quantile7(s, 0.25), quantile7(s, 0.75)
    iqr = q3 - q1
    if iqr == 0.0:
        return _finding(name, [], [], "iqr", k, t0, dt)
    lo, hi = q1 - k * iqr, q3 + k * iqr
    below = x < lo
    above = x > hi
    idx = np.flatnonzero(below | above)
    dist = np.where(below, lo - x, x - hi)[idx]
    return _finding(name, idx, dist / iqr, "iqr", k, t0, dt)


# ---------------------------------------------------------------------------
# isolation forest


def average_path_length(n: int) -> float:
    """Expected path length of an unsuccessful BST search over ``n`` points."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


class _IsolationTree:
    __slots__ = ("feature", "threshold", "left", "right", "path_at_leaf")

    def __init__(self, X: np.ndarray, rng: np.random.Generator, height_limit: int) -> None:
        feature: list[int] = []
        threshold: list[float] = []
        left: list[int] = []
        right: list[int] = []
        path: list[float] = []

        def new_node() -> int:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            path.append(0.0)
            return len(feature) - 1

        root = new_node()
        stack = [(root, np.arange(X.shape[0]), 0)]
        while stack:
            node, idx, depth = stack.pop()
            if depth >= height_limit or len(idx) <= 1:
                path[node] = depth + average_path_length(len(idx))
                continue
            sub = X[idx]
            lo = sub.min(axis=0)
            hi = sub.max(axis=0)
            candidates = np.flatnonzero(hi > lo)
            if len(candidates) == 0:
                # all points identical: no split can separate them
                path[node] = depth + average_path_length(len(idx))
                continue
            q = int(candidates[rng.integers(len(candidates))])
            split = float(rng.uniform(lo[q], hi[q]))
            go_left = sub[:, q] < split
            l_node, r_node = new_node(), new_node()
            feature[node] = q
            threshold[node] = split
            left[node] = l_node
            right[node] = r_node
            stack.append((r_node, idx[~go_left], depth + 1))
            stack.append((l_node, idx[go_left], depth + 1))

        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.path_at_leaf = np.asarray(path, dtype=np.float64)

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            r = rows[internal]
            n = node[internal]
            go_left = X[r, feat[internal]] < self.threshold[n]
            node[internal] = np.where(go_left, self.left[n], self.right[n])
        return self.path_at_leaf[node]


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, MetricSeries):
        data = data.values
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X


def isolation_forest_scores(
    data, n_trees: int = 100, subsample: int = 256, seed: int = 42
) -> np.ndarray:
    """Anomaly score ``2**(-E[h(x)] / c(psi))`` for every row of ``data``.

    Each tree draws its randomness from ``(seed, tree_index)`` so results do not
    depend on evaluation order.
    """
    X = _as_matrix(data)
    n = X.shape[0]
    if n < 8:
        raise TooShort(f"isolation forest needs at least 8 samples, got {n}")
    if n_trees < 1 or subsample < 2:
        raise ValueError("n_trees must be >= 1 and subsample >= 2")
    psi = min(subsample, n)
    height_limit = int(math.ceil(math.log2(psi)))
    total = np.zeros(n)
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        sample = rng.choice(n, size=psi, replace=False)
        tree = _IsolationTree(X[sample], rng, height_limit)
        total += tree.path_lengths(X)
    mean_path = total / n_trees
    return np.power(2.0, -mean_path / average_path_length(psi))


def isolation_forest_detect(
    data,
    n_trees: int = 100,
    subsample: int = 256,
    seed: int = 42,
    score_threshold: float = 0.6,
) -> AnomalyFinding:
    name, _, t0, dt = _unpack(data) if isinstance(data, MetricSeries) else ("", None, 0, 1)
    scores = isolation_forest_scores(data, n_trees=n_trees, subsample=subsample, seed=seed)
    idx = np.flatnonzero(scores > score_threshold)
    return _finding(name, idx, scores[idx], "isolation_forest", score_threshold, t0, dt)


# ---------------------------------------------------------------------------
# detector selection


def select_detector(
    series,
    min_length: int = 50,
    skew_limit: float = 1.0,
    kurtosis_limit: float = 1.0,
) -> str:
    """Pick a detector from the length and shape of the data.

    Short series get IQR fences; near-normal series (small skewness and excess
    kurtosis) get z-scores; everything else gets an isolation forest.
    """
    _, x, _, _ = _unpack(series)
    if len(x) < min_length:
        return "iqr"
    skew, kurt = moments(x)
    if abs(skew) < skew_limit and abs(kurt) < kurtosis_limit:
        return "zscore"
    return "isolation_forest"


# ---------------------------------------------------------------------------
# PCA combined scoring


def combined_pca_score(
    data: Experiment | Mapping[str, Sequence[float]],
    metrics: Sequence[str] | None = None,
    components: int | None = None,
    threshold: float = 3.0,
) -> CombinedAnomalyFinding:
    """Score each timestamp by its squared PCA reconstruction error.

    Metrics are standardized, the covariance matrix is eigendecomposed and
    the top ``components`` directions are kept.  The per-sample error is then
    standardized; samples above ``threshold`` are returned in ``top_k``.
    By default ``components = min(3, m - 1)`` for ``m`` usable metrics, since
    keeping all ``m`` directions reconstructs every sample exactly.
    """
    if isinstance(data, Experiment):
        names = list(metrics) if metrics else data.metric_names
        columns = {m: data.series[m].values for m in names}
        t0, dt, n = data.t0, data.dt, data.length
    else:
        names = list(metrics) if metrics else list(data)
        columns = {m: np.asarray(data[m], dtype=np.float64) for m in names}
        t0, dt = 0, 1
        n = len(next(iter(columns.values()))) if columns else 0
    if len(names) < 2:
        raise DegenerateInput("combined scoring needs at least 2 metrics")
    kept: list[str] = []
    dropped: list[str] = []
    cols = []
    for m in names:
        x = columns[m]
        if len(x) != n:
            raise ValueError("metrics must share one grid")
        if np.isnan(x).any():
            raise ValueError(f"metric {m!r} has gaps; fill them first")
        sd = x.std()
        if sd == 0.0:
            logger.warning("dropping zero-variance metric %r from combined scoring", m)
            dropped.append(m)
            continue
        kept.append(m)
        cols.append((x - x.mean()) / sd)
    if len(kept) < 2:
        raise DegenerateInput("fewer than 2 non-constant metrics")
    Z = np.column_stack(cols)
    m = Z.shape[1]
    k = min(3, m - 1) if components is None else int(components)
    if not 1 <= k <= m:
        raise ValueError(f"components must be in [1, {m}], got {k}")
    cov = (Z.T @ Z) / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    V = evecs[:, :k]
    resid = Z - (Z @ V) @ V.T
    err = np.einsum("ij,ij->i", resid, resid)
    sd = err.std()
    scores = (err - err.mean()) / sd if sd > 0 else np.zeros_like(err)
    top = np.flatnonzero(scores > threshold)
    total = float(evals.sum())
    return CombinedAnomalyFinding(
        metrics=kept,
        dropped=dropped,
        components=k,
        timestamps=(t0 + np.arange(n, dtype=np.int64) * dt).tolist(),
        combined_scores=scores.tolist(),
        top_k=top.tolist(),
        threshold=threshold,
        explained_variance=[float(v / total) for v in evals[:k]] if total > 0 else [],
    )


# ---------------------------------------------------------------------------
# module


class AnomalyModule(AnalysisModule):
    """Per-metric detection with automatic detector choice plus combined PCA view.

    Confidence is the mean observed (pre-fill) fraction of the analyzed
    metrics: findings resting on interpolated data are weaker.
    """

    descriptor = ModuleDescriptor(
        name="anomaly",
        version="1.0.0",
        produces="anomaly",
        summary="Flags suspicious timestamps per metric and across metrics.",
        parameter_schema=(
            ParamSpec("metrics", "list", [], "Metrics to scan (empty = all)."),
            ParamSpec("detector", "enum", "auto", "Detector or auto-selection.",
                      choices=("auto",) + DETECTORS),
            ParamSpec("zscore_threshold", "float", 3.0, "z-score magnitude threshold."),
            ParamSpec("iqr_k", "float", 1.5, "Tukey fence multiplier."),
            ParamSpec("n_trees", "int", 100, "Isolation forest size."),
            ParamSpec("subsample", "int", 256, "Isolation forest subsample size."),
            ParamSpec("score_threshold", "float", 0.6, "Isolation forest score threshold."),
            ParamSpec("seed", "int", 42, "Random seed for the isolation forest."),
            ParamSpec("min_length", "int", 50, "Auto-selection: shorter series use IQR."),
            ParamSpec("skew_limit", "float", 1.0, "Auto-selection: |skewness| gate for z-score."),
            ParamSpec("kurtosis_limit", "float", 1.0, "Auto-selection: |excess kurtosis| gate."),
            ParamSpec("combined", "enum", "auto", "Combined PCA scoring.",
                      choices=("auto", "on", "off")),
            ParamSpec("pca_components", "int", None, "PCA components (default min(3, m-1)).",
                      nullable=True),
            ParamSpec("pca_threshold", "float", 3.0, "Standardized combined-score threshold."),
            ParamSpec("gap_policy", "enum", "linear", "Gap filling before detection.",
                      choices=GAP_POLICIES),
        ),
    )

    def analyze(self, experiment: Experiment, params: dict[str, Any]) -> ModuleResult:
        names = select_metrics(experiment, params["metrics"])
        findings: list[dict] = []
        skipped: list[dict] = []
        filled: dict[str, MetricSeries] = {}
        coverage: list[float] = []
        story: list[dict] = []
        actions: list[dict] = []
        for name in names:
            raw = experiment.series[name]
            try:
                s = fill_gaps(raw, params["gap_policy"])
            except AllMissing:
                skipped.append({"metric": name, "reason": "all samples missing"})
                continue
            if np.isnan(s.values).any():
                skipped.append({"metric": name, "reason": "gaps left by gap_policy=keep"})
                continue
            detector = params["detector"]
            if detector == "auto":
                detector = select_detector(
                    s, params["min_length"], params["skew_limit"], params["kurtosis_limit"]
                )
            try:
                finding = self._detect(s, detector, params)
            except TooShort as exc:
                skipped.append({"metric": name, "reason": str(exc)})
                continue
            filled[name] = s
            coverage.append(1.0 - float(np.isnan(raw.values).mean()) if len(raw) else 0.0)
            findings.append(finding.to_dict())
            if finding.indices:
                story.append(narrative(
                    "anomaly.flagged",
                    metric=name,
                    count=len(finding.indices),
                    detector=detector,
                    threshold=float(finding.threshold_used),
                    max_score=float(max(finding.scores)),
                    first_ts=finding.timestamps[0],
                ))
                actions.append({
                    "rule": "INVESTIGATE",
                    "values": {"metric": name, "first_ts": finding.timestamps[0],
                               "count": len(finding.indices)},
                })

        combined = None
        usable = [m for m in filled if np.ptp(filled[m].values) > 0]
        want = params["combined"]
        if want == "on" or (want == "auto" and len(usable) >= 2):
            try:
                cf = combined_pca_score(
                    {m: filled[m].values for m in filled},
                    components=params["pca_components"],
                    threshold=params["pca_threshold"],
                )
            except DegenerateInput as exc:
                skipped.append({"metric": "<combined>", "reason": str(exc)})
            else:
                cf.timestamps = (
                    experiment.t0 + np.arange(experiment.length, dtype=np.int64) * experiment.dt
                ).tolist()
                combined = cf.to_dict()
                if cf.top_k:
                    story.append(narrative(
                        "anomaly.combined",
                        count=len(cf.top_k),
                        metrics=len(cf.metrics),
                        max_score=float(max(cf.combined_scores)),
                        first_ts=cf.timestamps[cf.top_k[0]],
                    ))

        if not story:
            story.append(narrative("anomaly.none", metrics=len(findings)))
        confidence = float(np.mean(coverage)) if coverage else 0.0
        return ModuleResult(
            findings={
                "metrics": findings,
                "combined": combined,
                "skipped": skipped,
                "anomaly_count": sum(len(f["indices"]) for f in findings),
                "recommendations": actions,
            },
            confidence=confidence,
            narrative_seed=story,
        )

    @staticmethod
    def _detect(s: MetricSeries, detector: str, params: dict[str, Any]) -> AnomalyFinding:
        if detector == "zscore":
            return zscore_detect(s, params["zscore_threshold"])
        if detector == "iqr":
            return iqr_detect(s, params["iqr_k"])
        return isolation_forest_detect(
            s,
            n_trees=params["n_trees"],
            subsample=params["subsample"],
            seed=params["seed"],
            score_threshold=params["score_threshold"],
        )
