"""Plug-in functionals of estimated conditional laws: moments, CDF and
quantiles, Mahalanobis outlyingness, and survey-weighted tolerance regions.

Every operation is a pure function of a `WeightedDistribution` (or of a fitted
forest for the tolerance machinery), safe for concurrent evaluation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .forest import Forest, NoSupport, forest_weights_batch
from .kernels import KernelSpec, WeightedDistribution, mmd2_exact
from .survey import SurveySample

__all__ = [
    "ConditionalSummary",
    "ToleranceRegion",
    "cond_mean",
    "cond_cov",
    "conditional_summary",
    "cond_cdf",
    "cond_quantile",
    "weighted_quantile",
    "mahalanobis_score",
    "tolerance_threshold",
    "tolerance_contains",
    "mmd_to_reference",
    "export_tolerance_report",
    "DegenerateSupportWarning",
    "SingularCovariance",
]

# Relative ridge added to covariances before inversion: ridge = RIDGE_SCALE * trace / d.
RIDGE_SCALE = 1e-8


class DegenerateSupportWarning(UserWarning):
    """Covariance requested on a single support point."""


class SingularCovariance(ValueError):
    """Covariance not invertible even after the ridge."""


@dataclass(frozen=True)
class ConditionalSummary:
    """First two moments of an estimated conditional law."""

    mean: np.ndarray
    covariance: np.ndarray
    support_size: int
    degenerate: bool = False


@dataclass(frozen=True)
class ToleranceRegion:
    """Survey-weighted tolerance region: y belongs at x iff the conditional
    Mahalanobis score S(x, y) is at most the stored threshold."""

    alpha: float
    threshold: float
    ridge_scale: float
    scores: np.ndarray
    score_weights: np.ndarray

    def __post_init__(self):
        if not (0 < self.alpha < 1):
            raise ValueError("alpha must lie in (0, 1)")
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")


def cond_mean(dist: WeightedDistribution) -> np.ndarray:
    """Weighted mean of the support points."""
    return dist.weights @ dist.points


def cond_cov(dist: WeightedDistribution) -> np.ndarray:
    """Weighted covariance around the weighted mean.

    A single-point support yields the zero matrix with a
    DegenerateSupportWarning.
    """
    if dist.n < 2:
        warnings.warn("covariance of a point mass is zero", DegenerateSupportWarning)
        return np.zeros((dist.dim, dist.dim))
    centered = dist.points - cond_mean(dist)
    cov = (centered * dist.weights[:, None]).T @ centered
    return 0.5 * (cov + cov.T)


def conditional_summary(dist: WeightedDistribution) -> ConditionalSummary:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSupportWarning)
        cov = cond_cov(dist)
    return ConditionalSummary(
        mean=cond_mean(dist), covariance=cov, support_size=dist.n, degenerate=dist.n < 2
    )


def cond_cdf(dist: WeightedDistribution, y) -> float:
    """P(Y <= y componentwise) under the estimated law."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != dist.dim:
        raise ValueError(f"query has dimension {y.size}, expected {dist.dim}")
    inside = np.all(dist.points <= y, axis=1)
    return float(dist.weights[inside].sum())


def weighted_quantile(values, weights, tau: float) -> float:
    """Left-continuous inverse: smallest value whose cumulative sorted weight
    reaches tau. Weights need not be normalized."""
    if not (0 < tau < 1):
        raise ValueError("tau must lie in (0, 1)")
    values = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(w[order])
    target = tau * cum[-1]
    k = int(np.searchsorted(cum, target, side="left"))
    return float(values[order[min(k, values.size - 1)]])


def cond_quantile(dist: WeightedDistribution, component: int, tau: float) -> float:
    """Weighted tau-quantile of one outcome coordinate."""
    return weighted_quantile(dist.points[:, component], dist.weights, tau)


def _ridged(cov: np.ndarray, ridge: float | None) -> tuple[np.ndarray, float]:
    d = cov.shape[0]
    if ridge is None:
        ridge = RIDGE_SCALE * float(np.trace(cov)) / d
    return cov + ridge * np.eye(d), ridge


def mahalanobis_score(summary: ConditionalSummary, y, ridge: float | None = None) -> float:
    """(y - mean)' (cov + ridge I)^{-1} (y - mean); ridge defaults to
    1e-8 * trace(cov) / d."""
    y = np.asarray(y, dtype=float).ravel()
    diff = y - summary.mean
    mat, _ = _ridged(summary.covariance, ridge)
    try:
        sol = np.linalg.solve(mat, diff)
    except np.linalg.LinAlgError as err:
        raise SingularCovariance("covariance singular after the ridge") from err
    score = float(diff @ sol)
    if not np.isfinite(score):
        raise SingularCovariance("covariance effectively singular after the ridge")
    return max(score, 0.0)


def _scores_for_queries(forest: Forest, X, Y, ridge: float | None) -> np.ndarray:
    W, contrib = forest_weights_batch(forest, X)
    if np.any(contrib == 0):
        missing = int(np.flatnonzero(contrib == 0)[0])
        raise NoSupport(f"no estimation mass at sampled point {missing}")
    scores = np.empty(X.shape[0])
    for a in range(X.shape[0]):
        keep = W[a] > 0
        dist = WeightedDistribution(forest.sample.Y[keep], W[a][keep] / W[a][keep].sum())
        scores[a] = mahalanobis_score(conditional_summary(dist), Y[a], ridge)
    return scores


def tolerance_threshold(
    forest: Forest,
    sample: SurveySample,
    alpha: float,
    ridge: float | None = None,
) -> ToleranceRegion:
    """Survey-weighted (1 - alpha) quantile of the per-unit conditional
    Mahalanobis scores, defining one global tolerance threshold."""
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    scores = _scores_for_queries(forest, sample.X, sample.Y, ridge)
    hajek = sample.weights / sample.weights.sum()
    threshold = weighted_quantile(scores, hajek, 1.0 - alpha)
    return ToleranceRegion(
        alpha=alpha,
        threshold=threshold,
        ridge_scale=RIDGE_SCALE if ridge is None else ridge,
        scores=scores,
        score_weights=hajek,
    )


def tolerance_contains(region: ToleranceRegion, forest: Forest, x, y) -> bool:
    """Membership test S(x, y) <= threshold."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    score = _scores_for_queries(forest, x[None, :], y[None, :], None)[0]
    return bool(score <= region.threshold)


def mmd_to_reference(
    dist: WeightedDistribution, reference: WeightedDistribution, kernel: KernelSpec
) -> float:
    """Kernel distance (square root of the exact squared MMD) to a reference law."""
    return float(np.sqrt(mmd2_exact(dist, reference, kernel)))


def export_tolerance_report(
    forest: Forest,
    sample: SurveySample,
    covariate_grid,
    alphas,
    y_grid,
    csv_path,
    json_path,
) -> None:
    """Write the tolerance-region export: a CSV of outcome grid points with
    membership flags per covariate combination and alpha, and a JSON summary
    with the conditional mean, covariance, and thresholds per combination."""
    import pandas as pd

    Xg = np.atleast_2d(np.asarray(covariate_grid, dtype=float))
    Yg = np.atleast_2d(np.asarray(y_grid, dtype=float))
    regions = {float(a): tolerance_threshold(forest, sample, float(a)) for a in alphas}
    W, contrib = forest_weights_batch(forest, Xg)
    rows = []
    summaries = []
    for c in range(Xg.shape[0]):
        if contrib[c] == 0:
            raise NoSupport(f"no estimation mass at grid combination {c}")
        keep = W[c] > 0
        dist = WeightedDistribution(forest.sample.Y[keep], W[c][keep] / W[c][keep].sum())
        summ = conditional_summary(dist)
        scores = np.array([mahalanobis_score(summ, y) for y in Yg])
        for a, region in regions.items():
            inside = scores <= region.threshold
            for g in range(Yg.shape[0]):
                row = {"combination": c, "alpha": a, "inside": int(inside[g])}
                for k in range(Yg.shape[1]):
                    row[f"y{k + 1}"] = Yg[g, k]
                rows.append(row)
        summaries.append(
            {
                "combination": c,
                "x": Xg[c].tolist(),
                "mean": summ.mean.tolist(),
                "covariance": summ.covariance.tolist(),
                "thresholds": {str(a): regions[a].threshold for a in regions},
                "support_size": summ.support_size,
            }
        )
    pd.DataFrame(rows).to_csv(csv_path, index=False)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"combinations": summaries}, fh, indent=1)
