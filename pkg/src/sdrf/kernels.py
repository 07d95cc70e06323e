"""Gaussian-RBF kernels on the outcome space, weighted kernel mean embeddings,
and exact / random-Fourier-feature MMD computation.

A `WeightedDistribution` (points + normalized weights) is the universal
representation of an estimated conditional law throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from ._rng import derive_rng

__all__ = [
    "KernelSpec",
    "WeightedDistribution",
    "FeatureMean",
    "median_heuristic",
    "kernel_eval",
    "gaussian_gram",
    "mmd2_exact",
    "rff_features",
    "rff_feature_matrix",
    "feature_mean",
    "mmd2_rff",
    "DegenerateSample",
    "DimensionMismatch",
    "UnnormalizedInput",
    "ZeroDim",
]


class DegenerateSample(ValueError):
    """All pairwise distances are zero; no bandwidth can be selected."""


class DimensionMismatch(ValueError):
    """Outcome vectors live in different dimensions."""


class UnnormalizedInput(ValueError):
    """Weights of a distribution do not sum to one."""


class ZeroDim(ValueError):
    """Feature-map operation requested on a spec with rff_dim == 0."""


# Bandwidth selection subsamples above this size; the seed is fixed so the
# selected bandwidth never depends on caller RNG state.
_MEDIAN_MAX_POINTS = 2000
_MEDIAN_SEED = 714025


def median_heuristic(points) -> float:
    """Median of pairwise Euclidean distances, the default RBF bandwidth.

    Subsamples uniformly at random (fixed seed) to at most 2000 points so the
    cost stays bounded in n. Raises DegenerateSample when every pairwise
    distance is zero.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n < 2:
        raise DegenerateSample("need at least two points for the median heuristic")
    if n > _MEDIAN_MAX_POINTS:
        keep = derive_rng(_MEDIAN_SEED, "median-subsample").choice(
            n, size=_MEDIAN_MAX_POINTS, replace=False
        )
        pts = pts[np.sort(keep)]
    med = float(np.median(pdist(pts)))
    if med <= 0.0:
        raise DegenerateSample("all pairwise distances are zero")
    return med


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian RBF kernel exp(-||y - y'||^2 / (2 bandwidth^2)).

    rff_dim > 0 enables the random-Fourier-feature approximation (must be
    even: features come in cosine/sine pairs). Frequencies are materialized
    once per spec and per outcome dimension, from rff_seed, so all trees of a
    forest score splits with the same feature map.
    """

    bandwidth: float
    rff_dim: int = 0
    rff_seed: int = 0
    family: str = "gaussian-rbf"

    def __post_init__(self):
        if self.family != "gaussian-rbf":
            raise ValueError(f"unsupported kernel family: {self.family!r}")
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError("bandwidth must be a positive finite real")
        if self.rff_dim < 0 or (self.rff_dim > 0 and self.rff_dim % 2 != 0):
            raise ValueError("rff_dim must be 0 or a positive even integer")
        object.__setattr__(self, "_freq_cache", {})

    def frequencies(self, dim: int) -> np.ndarray:
        """(rff_dim/2, dim) frequency matrix, i.i.d. N(0, bandwidth^-2)."""
        if self.rff_dim == 0:
            raise ZeroDim("spec has rff_dim == 0; no feature map available")
        cached = self._freq_cache.get(dim)
        if cached is None:
            rng = derive_rng(self.rff_seed, "rff-frequencies", dim)
            cached = rng.standard_normal((self.rff_dim // 2, dim)) / self.bandwidth
            cached.setflags(write=False)
            self._freq_cache[dim] = cached
        return cached

    def __getstate__(self):
        # drop the cache; frequencies are recomputed identically from the seed
        return {
            "bandwidth": self.bandwidth,
            "rff_dim": self.rff_dim,
            "rff_seed": self.rff_seed,
            "family": self.family,
        }

    def __setstate__(self, state):
        for k, v in state.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "_freq_cache", {})


@dataclass(frozen=True)
class WeightedDistribution:
    """Discrete law: outcome points in R^d with nonnegative weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.ndim != 2:
            raise ValueError("points must be an (n, d) array")
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights must have the same length")
        if w.shape[0] == 0:
            raise ValueError("distribution needs at least one support point")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise ValueError("points and weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise UnnormalizedInput(f"weights sum to {w.sum()!r}, expected 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_unnormalized(cls, points, raw_weights) -> "WeightedDistribution":
        raw = np.asarray(raw_weights, dtype=float).ravel()
        total = raw.sum()
        if not (np.isfinite(total) and total > 0):
            raise ValueError("total weight must be positive and finite")
        return cls(points, raw / total)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class FeatureMean:
    """Random-feature image of a kernel mean embedding."""

    vector: np.ndarray
    total_weight: float

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=float).ravel()
        if not np.all(np.isfinite(vec)):
            raise ValueError("feature mean must be finite")
        if float(np.linalg.norm(vec)) > np.sqrt(2.0) + 1e-9:
            raise ValueError("feature mean norm exceeds the bounded-map limit")
        if not self.total_weight > 0:
            raise ValueError("total_weight must be positive")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


def _as_2d(y) -> np.ndarray:
    arr = np.asarray(y, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def kernel_eval(y, y_other, spec: KernelSpec) -> float:
    """exp(-||y - y'||^2 / (2 bandwidth^2)), in (0, 1]."""
    a = np.asarray(y, dtype=float).ravel()
    b = np.asarray(y_other, dtype=float).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimensions {a.shape[0]} vs {b.shape[0]}")
    d2 = float(np.sum((a - b) ** 2))
    return float(np.exp(-d2 / (2.0 * spec.bandwidth**2)))


def gaussian_gram(A, B, bandwidth: float) -> np.ndarray:
    """Kernel matrix k(a_i, b_j) for row-stacked outcome arrays."""
    A = _as_2d(A)
    B = _as_2d(B)
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"dimensions {A.shape[1]} vs {B.shape[1]}")
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(sq / (-2.0 * bandwidth**2))


def _check_pair(P: WeightedDistribution, Q: WeightedDistribution) -> None:
    if P.dim != Q.dim:
        raise DimensionMismatch(f"dimensions {P.dim} vs {Q.dim}")
    for dist in (P, Q):
        if abs(dist.weights.sum() - 1.0) > 1e-9:
            raise UnnormalizedInput("distribution weights must sum to 1")


def mmd2_exact(P: WeightedDistribution, Q: WeightedDistribution, spec: KernelSpec) -> float:
    """Squared MMD between two weighted laws via the full double sum.

    Clamped at zero from below: the population quantity is nonnegative and
    only floating-point cancellation can push the estimate negative.
    """
    _check_pair(P, Q)
    wp, wq = P.weights, Q.weights
    kpp = wp @ gaussian_gram(P.points, P.points, spec.bandwidth) @ wp
    kqq = wq @ gaussian_gram(Q.points, Q.points, spec.bandwidth) @ wq
    kpq = wp @ gaussian_gram(P.points, Q.points, spec.bandwidth) @ wq
    return max(float(kpp + kqq - 2.0 * kpq), 0.0)


def rff_feature_matrix(Y, spec: KernelSpec) -> np.ndarray:
    """(n, rff_dim) random-feature matrix [cos block | sin block].

    Inner products of rows approximate the kernel; each row has norm exactly 1.
    """
    Y2 = _as_2d(Y)
    freqs = spec.frequencies(Y2.shape[1])  # raises ZeroDim when rff_dim == 0
    proj = Y2 @ freqs.T
    scale = np.sqrt(2.0 / spec.rff_dim)
    return np.concatenate([scale * np.cos(proj), scale * np.sin(proj)], axis=1)


def rff_features(y, spec: KernelSpec) -> np.ndarray:
    """Feature vector of a single outcome point."""
    return rff_feature_matrix(np.asarray(y, dtype=float).ravel(), spec)[0]


def feature_mean(points, weights, spec: KernelSpec) -> FeatureMean:
    """Weighted mean of feature vectors; weights need not be normalized."""
    w = np.asarray(weights, dtype=float).ravel()
    total = float(w.sum())
    if not (np.isfinite(total) and total > 0):
        raise ValueError("total weight must be positive")
    Z = rff_feature_matrix(points, spec)
    return FeatureMean(vector=(w / total) @ Z, total_weight=total)


def mmd2_rff(P: WeightedDistribution, Q: WeightedDistribution, spec: KernelSpec) -> float:
    """Squared MMD in the random-feature approximation.

    Equals the squared Euclidean distance between the feature means; exactly
    zero for identical inputs.
    """
    _check_pair(P, Q)
    mu_p = P.weights @ rff_feature_matrix(P.points, spec)
    mu_q = Q.weights @ rff_feature_matrix(Q.points, spec)
    diff = mu_p - mu_q
    return float(diff @ diff)
