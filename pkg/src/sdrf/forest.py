"""Design-aware distributional random forest.

Each tree is grown on a design-bootstrap resample, restricted to a random
PSU-level "split" half (honesty), with axis-aligned splits chosen to maximize
a weighted MMD between the child node distributions. Leaf mass for prediction
comes exclusively from the complementary "estimation" PSUs, so the data that
shaped the partition never populates it. Aggregation returns per-unit weights
that represent the estimated conditional law at a query point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from ._rng import derive_rng
from .bootstrap import (
    BootstrapConfig,
    ResampleDraw,
    average_multipliers,
    build_pseudo_population,
    draw_multipliers,
    iid_multipliers,
)
from .kernels import (
    KernelSpec,
    WeightedDistribution,
    gaussian_gram,
    median_heuristic,
    mmd2_exact,
    mmd2_rff,
    rff_feature_matrix,
)
from .survey import SurveySample, psu_codes

__all__ = [
    "ForestConfig",
    "HonestyPartition",
    "TreeNode",
    "FittedTree",
    "Forest",
    "honesty_partition",
    "guard_node_weights",
    "split_score",
    "best_split",
    "fit_tree",
    "fit_forest",
    "forest_weights",
    "predict_distribution",
    "audit_forest",
    "forest_to_dict",
    "forest_from_dict",
    "save_forest",
    "load_forest",
    "TooFewPSUs",
    "InvalidSplit",
    "EmptySplitSide",
    "NoSupport",
]

_MAX_REDRAWS = 100
_MIN_GAIN = 1e-12
FOREST_FORMAT = "sdrf-forest"
FOREST_VERSION = 1


class TooFewPSUs(ValueError):
    """Honesty needs at least two distinct PSUs."""


class InvalidSplit(ValueError):
    """Candidate split leaves a child under the minimum size or mass."""


class EmptySplitSide(RuntimeError):
    """No unit with positive multiplier landed on the split side."""


class NoSupport(RuntimeError):
    """No tree carries estimation mass at the query point."""


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters. None fields are resolved against the sample at
    fit time: min_node_size -> max(20, ceil(sqrt(n_s))), mtry ->
    max(1, ceil(sqrt(p))), max_weight_ratio -> 5.5 * (max w / min w), kernel ->
    Gaussian RBF with median-heuristic bandwidth and `rff_dim` features."""

    n_trees: int = 100
    honesty_prob: float = 0.5
    max_depth: int = 8
    min_node_size: int | None = None
    max_weight_ratio: float | None = None
    mtry: int | None = None
    threshold_grid: int = 64
    kernel: KernelSpec | None = None
    rff_dim: int = 256
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    resampling: str = "design"
    master_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("need at least one tree")
        if not (0 < self.honesty_prob < 1):
            raise ValueError("honesty probability must lie in (0, 1)")
        if self.min_node_size is not None and self.min_node_size < 1:
            raise ValueError("min_node_size must be at least 1")
        if self.threshold_grid < 1:
            raise ValueError("threshold_grid must be at least 1")
        if self.resampling not in ("design", "iid"):
            raise ValueError(f"unknown resampling mode: {self.resampling!r}")


@dataclass(frozen=True)
class HonestyPartition:
    """Disjoint PSU label sets; split PSUs shape trees, est PSUs fill leaves."""

    split_psus: frozenset
    est_psus: frozenset

    def __post_init__(self):
        if self.split_psus & self.est_psus:
            raise ValueError("split and est PSU sets must be disjoint")
        if not self.split_psus or not self.est_psus:
            raise ValueError("both PSU sets must be nonempty")


@dataclass
class TreeNode:
    """Internal node (feature, threshold, children) or leaf (leaf_id >= 0)."""

    feature: int = -1
    threshold: float = float("nan")
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    leaf_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.leaf_id >= 0

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.leaf_id}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TreeNode":
        if "leaf" in data:
            return cls(leaf_id=int(data["leaf"]))
        return cls(
            feature=int(data["feature"]),
            threshold=float(data["threshold"]),
            left=cls.from_dict(data["left"]),
            right=cls.from_dict(data["right"]),
        )


def honesty_partition(psu_labels, honesty_prob: float, seed) -> HonestyPartition:
    """Assign each distinct PSU to the split side with the given probability;
    redraw (derived seed, capped) until both sides are nonempty."""
    labels = np.unique(np.asarray(psu_labels).ravel())
    if labels.size < 2:
        raise TooFewPSUs("honesty needs at least two distinct PSUs")
    for attempt in range(_MAX_REDRAWS):
        rng = derive_rng(seed, "honesty", attempt)
        to_split = rng.uniform(size=labels.size) < honesty_prob
        if to_split.any() and not to_split.all():
            return HonestyPartition(
                split_psus=frozenset(labels[to_split].tolist()),
                est_psus=frozenset(labels[~to_split].tolist()),
            )
    raise TooFewPSUs(f"could not form a nonempty partition in {_MAX_REDRAWS} draws")


def _node_mmd2(Y_left, w_left, Y_right, w_right, kernel: KernelSpec) -> float:
    P = WeightedDistribution.from_unnormalized(Y_left, w_left)
    Q = WeightedDistribution.from_unnormalized(Y_right, w_right)
    if kernel.rff_dim > 0:
        return mmd2_rff(P, Q, kernel)
    return mmd2_exact(P, Q, kernel)


def guard_node_weights(eff: np.ndarray, max_weight_ratio: float | None) -> np.ndarray:
    """Enforce the node weight-ratio cap by lifting the light tail: positive
    effective weights below max/ratio are raised to max/ratio. Large design
    weights, which carry the bias correction, are never shrunk; zero entries
    (units absent from the resample) stay zero."""
    if max_weight_ratio is None or not np.isfinite(max_weight_ratio):
        return eff
    pos = eff > 0
    if not pos.any():
        return eff
    floor = eff[pos].max() / max_weight_ratio
    out = np.asarray(eff, dtype=float).copy()
    out[pos] = np.maximum(out[pos], floor)
    return out


def split_score(
    X,
    Y,
    pi,
    multipliers,
    feature: int,
    threshold: float,
    kernel: KernelSpec,
    honesty_prob: float = 0.5,
    min_node_size: int = 1,
    max_weight_ratio: float | None = None,
) -> float:
    """Score of one candidate split of one node.

    (N_L * N_R / N_parent^2) * MMD^2 between the Hájek child distributions,
    where unit mass is n*_i / (q * pi_i). Uses the feature-map MMD when the
    kernel has rff_dim > 0 and the exact double sum otherwise. Raises
    InvalidSplit when a child has fewer than min_node_size represented units
    or no positive mass. When max_weight_ratio is given, the node's positive
    effective weights are ratio-guarded first.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    eff = np.asarray(multipliers, dtype=float) / (honesty_prob * np.asarray(pi, dtype=float))
    present = eff > 0
    eff = guard_node_weights(np.where(present, eff, 0.0), max_weight_ratio)
    go_left = X[:, feature] <= threshold
    left = present & go_left
    right = present & ~go_left
    if left.sum() < min_node_size or right.sum() < min_node_size:
        raise InvalidSplit("child below the minimum node size")
    n_left, n_right = eff[left].sum(), eff[right].sum()
    if not (n_left > 0 and n_right > 0):
        raise InvalidSplit("child has no positive mass")
    total = n_left + n_right
    prefactor = (n_left * n_right) / total**2
    return prefactor * _node_mmd2(Y[left], eff[left], Y[right], eff[right], kernel)


def _candidate_boundaries(x_sorted, cw, min_node_size, grid):
    """Split positions t (left child = sorted[:t]) at weighted-quantile
    midpoints of the distinct values; all boundaries when grid is large."""
    n = x_sorted.size
    change = np.flatnonzero(np.diff(x_sorted) > 0) + 1
    valid = change[(change >= min_node_size) & (change <= n - min_node_size)]
    if valid.size == 0:
        return valid
    if valid.size > grid:
        total = cw[-1]
        targets = total * (np.arange(1, grid + 1) / (grid + 1))
        picks = np.searchsorted(cw[valid - 1], targets, side="left")
        valid = np.unique(valid[np.minimum(picks, valid.size - 1)])
    return valid


def _scan_feature_rff(Z_sorted, w_sorted, boundaries):
    """Scores at every boundary via weighted prefix sums of feature vectors."""
    cw = np.cumsum(w_sorted)
    cz = np.cumsum(w_sorted[:, None] * Z_sorted, axis=0)
    n_left = cw[boundaries - 1]
    n_right = cw[-1] - n_left
    mu_left = cz[boundaries - 1] / n_left[:, None]
    mu_right = (cz[-1] - cz[boundaries - 1]) / n_right[:, None]
    diff = mu_left - mu_right
    mmd2 = np.maximum(np.einsum("ij,ij->i", diff, diff), 0.0)
    return (n_left * n_right) / cw[-1] ** 2 * mmd2


def _scan_feature_exact(Y_sorted, w_sorted, boundaries, kernel):
    """Incremental exact double-sum scores along the sorted order."""
    K = gaussian_gram(Y_sorted, Y_sorted, kernel.bandwidth)
    w = w_sorted
    v_tot = K @ w
    s_tot = float(w @ v_tot)
    total = float(w.sum())
    u = np.zeros_like(w)
    s_ll = 0.0
    n_left = 0.0
    scores = np.empty(boundaries.size)
    b_iter = 0
    for m in range(Y_sorted.shape[0] - 1):
        wm = w[m]
        s_ll += 2.0 * wm * u[m] + wm * wm * K[m, m]
        u += wm * K[:, m]
        n_left += wm
        if b_iter < boundaries.size and boundaries[b_iter] == m + 1:
            cross = float(w @ u)
            s_rr = s_tot - 2.0 * cross + s_ll
            s_lr = cross - s_ll
            n_right = total - n_left
            mmd2 = max(s_ll / n_left**2 + s_rr / n_right**2 - 2.0 * s_lr / (n_left * n_right), 0.0)
            scores[b_iter] = (n_left * n_right) / total**2 * mmd2
            b_iter += 1
    return scores


def best_split(
    X,
    Y,
    eff_weights,
    candidate_features,
    kernel: KernelSpec,
    threshold_grid: int,
    min_node_size: int,
    Z=None,
):
    """Best (feature, threshold, score) over weighted-quantile midpoint
    thresholds of the candidate features; None when no valid candidate scores
    above the minimum gain. Ties break to the lowest feature index, then the
    lowest threshold. `Z` optionally carries precomputed feature vectors."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    w = np.asarray(eff_weights, dtype=float)
    use_rff = kernel.rff_dim > 0
    if use_rff and Z is None:
        Z = rff_feature_matrix(Y, kernel)
    best = None
    for j in sorted(int(f) for f in candidate_features):
        xj = X[:, j]
        order = np.argsort(xj, kind="stable")
        x_sorted = xj[order]
        w_sorted = w[order]
        cw = np.cumsum(w_sorted)
        boundaries = _candidate_boundaries(x_sorted, cw, min_node_size, threshold_grid)
        if boundaries.size == 0:
            continue
        if use_rff:
            scores = _scan_feature_rff(Z[order], w_sorted, boundaries)
        else:
            scores = _scan_feature_exact(Y[order], w_sorted, boundaries, kernel)
        k = int(np.argmax(scores))
        if scores[k] > _MIN_GAIN and (best is None or scores[k] > best[2]):
            t = boundaries[k]
            threshold = 0.5 * (x_sorted[t - 1] + x_sorted[t])
            best = (j, float(threshold), float(scores[k]))
    return best


@dataclass
class FittedTree:
    """One tree: structure, honesty partition, resample, and the estimation
    side routed to leaves (row indices into the training sample)."""

    root: TreeNode
    partition: HonestyPartition
    draw: ResampleDraw
    est_idx: np.ndarray
    est_leaf: np.ndarray
    est_weights: np.ndarray
    depth: int
    n_leaves: int
    leaf_table: dict = field(default_factory=dict, repr=False)


@dataclass
class Forest:
    """Fitted ensemble plus the training sample it indexes into."""

    config: ForestConfig
    sample: SurveySample
    trees: list

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _resolve_config(config: ForestConfig, sample: SurveySample) -> ForestConfig:
    updates = {}
    if config.min_node_size is None:
        updates["min_node_size"] = int(max(20, np.ceil(np.sqrt(sample.n))))
    if config.mtry is None:
        updates["mtry"] = int(max(1, np.ceil(np.sqrt(sample.X.shape[1]))))
    elif not (1 <= config.mtry <= sample.X.shape[1]):
        raise ValueError("mtry must lie in [1, p]")
    if config.max_weight_ratio is None:
        w = sample.weights
        updates["max_weight_ratio"] = float(5.5 * w.max() / w.min())
    if config.kernel is None:
        updates["kernel"] = KernelSpec(
            bandwidth=median_heuristic(sample.Y),
            rff_dim=config.rff_dim,
            rff_seed=config.master_seed,
        )
    return replace(config, **updates) if updates else config


def fit_tree(
    sample: SurveySample,
    draw: ResampleDraw,
    partition: HonestyPartition,
    config: ForestConfig,
    seed,
    codes=None,
) -> TreeNode:
    """Grow one tree greedily on the split-side units, weighted
    n*_i / (q * pi_i) and ratio-guarded per node. Growth stops at max depth,
    minimum node size, or minimum gain."""
    config = _resolve_config(config, sample)
    if codes is None:
        codes = psu_codes(sample.stratum, sample.psu)
    split_set = np.fromiter(partition.split_psus, dtype=np.int64)
    mask = np.isin(codes, split_set) & (draw.multipliers > 0)
    if not mask.any():
        raise EmptySplitSide("no split-side unit with positive multiplier")
    rows = np.flatnonzero(mask)
    eff = draw.multipliers[rows] / (config.honesty_prob * sample.pi[rows])
    X = sample.X[rows]
    Y = sample.Y[rows]
    kernel = config.kernel
    Z = rff_feature_matrix(Y, kernel) if kernel.rff_dim > 0 else None
    rng = derive_rng(seed, "tree-growth")
    p = X.shape[1]
    counter = [0]

    def leaf() -> TreeNode:
        node = TreeNode(leaf_id=counter[0])
        counter[0] += 1
        return node

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        if depth >= config.max_depth or idx.size < 2 * config.min_node_size:
            return leaf()
        w_node = guard_node_weights(eff[idx], config.max_weight_ratio)
        feats = np.sort(rng.choice(p, size=config.mtry, replace=False))
        found = best_split(
            X[idx], Y[idx], w_node, feats, kernel,
            config.threshold_grid, config.min_node_size,
            Z=Z[idx] if Z is not None else None,
        )
        if found is None:
            return leaf()
        j, threshold, _ = found
        go_left = X[idx, j] <= threshold
        left = grow(idx[go_left], depth + 1)
        right = grow(idx[~go_left], depth + 1)
        return TreeNode(feature=j, threshold=threshold, left=left, right=right)

    return grow(np.arange(rows.size), 0)


def _route(root: TreeNode, X: np.ndarray) -> np.ndarray:
    """Leaf id of every row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty(X.shape[0], dtype=np.int64)
    stack = [(root, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        if node.is_leaf:
            out[rows] = node.leaf_id
            continue
        go_left = X[rows, node.feature] <= node.threshold
        stack.append((node.left, rows[go_left]))
        stack.append((node.right, rows[~go_left]))
    return out


def _tree_shape(root: TreeNode) -> tuple[int, int]:
    depth = n_leaves = 0
    stack = [(root, 0)]
    while stack:
        node, d = stack.pop()
        if node.is_leaf:
            n_leaves += 1
            depth = max(depth, d)
        else:
            stack.append((node.left, d + 1))
            stack.append((node.right, d + 1))
    return depth, n_leaves


def _attach_est_side(
    root: TreeNode,
    sample: SurveySample,
    draw: ResampleDraw,
    partition: HonestyPartition,
    config: ForestConfig,
    codes: np.ndarray,
) -> FittedTree:
    est_set = np.fromiter(partition.est_psus, dtype=np.int64)
    mask = np.isin(codes, est_set) & (draw.multipliers > 0)
    est_idx = np.flatnonzero(mask)
    est_w = draw.multipliers[est_idx] / ((1.0 - config.honesty_prob) * sample.pi[est_idx])
    est_leaf = _route(root, sample.X[est_idx]) if est_idx.size else np.empty(0, dtype=np.int64)
    table: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for lid in np.unique(est_leaf):
        sel = est_leaf == lid
        w = est_w[sel]
        total = w.sum()
        if total > 0:
            table[int(lid)] = (est_idx[sel], w / total)
    depth, n_leaves = _tree_shape(root)
    return FittedTree(
        root=root, partition=partition, draw=draw,
        est_idx=est_idx, est_leaf=est_leaf, est_weights=est_w,
        depth=depth, n_leaves=n_leaves, leaf_table=table,
    )


def _fit_one_tree(sample, config, design, pseudo, codes, b) -> FittedTree:
    master = config.master_seed
    if config.resampling == "iid":
        draw = iid_multipliers(sample.n, (master, "resample", b))
    else:
        draws = [
            draw_multipliers(
                pseudo, sample, design, (master, "resample", b, m), config.bootstrap
            )
            for m in range(config.bootstrap.average_m)
        ]
        draw = average_multipliers(draws)
    partition = honesty_partition(codes, config.honesty_prob, (master, "honesty", b))
    root = fit_tree(sample, draw, partition, config, (master, "tree", b), codes=codes)
    return _attach_est_side(root, sample, draw, partition, config, codes)


def fit_forest(
    sample: SurveySample,
    config: ForestConfig,
    design=None,
    workers: int = 1,
) -> Forest:
    """Fit the ensemble: one independent (resample, honesty partition) pair per
    tree, seeded deterministically from master_seed and the tree index. The
    result is identical for any worker count."""
    config = _resolve_config(config, sample)
    codes = psu_codes(sample.stratum, sample.psu)
    pseudo = None
    if config.resampling == "design":
        pseudo = build_pseudo_population(
            sample, design, (config.master_seed, "pseudo"), config.bootstrap
        )
    with threadpool_limits(limits=1):
        if workers == 1:
            trees = [
                _fit_one_tree(sample, config, design, pseudo, codes, b)
                for b in range(config.n_trees)
            ]
        else:
            trees = Parallel(n_jobs=workers)(
                delayed(_fit_one_tree)(sample, config, design, pseudo, codes, b)
                for b in range(config.n_trees)
            )
    return Forest(config=config, sample=sample, trees=trees)


def forest_weights_batch(forest: Forest, X_query) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit weight matrix (n_query, n_s) and per-query count of
    contributing trees. Rows with zero contributing trees are all zero."""
    Xq = np.atleast_2d(np.asarray(X_query, dtype=float))
    n_q = Xq.shape[0]
    W = np.zeros((n_q, forest.sample.n))
    contrib = np.zeros(n_q, dtype=np.int64)
    with threadpool_limits(limits=1):
        for tree in forest.trees:
            leaf_q = _route(tree.root, Xq)
            for lid in np.unique(leaf_q):
                entry = tree.leaf_table.get(int(lid))
                if entry is None:
                    continue
                rows_q = np.flatnonzero(leaf_q == lid)
                est_rows, w = entry
                W[np.ix_(rows_q, est_rows)] += w
                contrib[rows_q] += 1
    mass = W.sum(axis=1)
    np.divide(W, mass[:, None], out=W, where=mass[:, None] > 0)
    return W, contrib


def forest_weights(forest: Forest, x) -> np.ndarray:
    """Aggregation weights at one query point: the average over contributing
    trees of the normalized est-side leaf weights; sums to one."""
    W, contrib = forest_weights_batch(forest, np.asarray(x, dtype=float)[None, :])
    if contrib[0] == 0:
        raise NoSupport("no tree carries estimation mass at this point")
    return W[0]


def predict_distribution(forest: Forest, x) -> WeightedDistribution:
    """Estimated conditional law at x: est-side outcomes with their weights."""
    w = forest_weights(forest, x)
    keep = w > 0
    return WeightedDistribution(forest.sample.Y[keep], w[keep] / w[keep].sum())


def audit_forest(forest: Forest) -> dict:
    """Post-fit invariant audit: PSU-level honesty disjointness and the
    weight-ratio guard, replayed over the actually-scored (guarded) effective
    weights of every internal node."""
    config = forest.config
    codes = psu_codes(forest.sample.stratum, forest.sample.psu)
    all_psus = set(np.unique(codes).tolist())
    max_ratio = 0.0
    disjoint = True
    covered = True
    for tree in forest.trees:
        part = tree.partition
        disjoint &= not (part.split_psus & part.est_psus)
        covered &= (part.split_psus | part.est_psus) == all_psus
        split_set = np.fromiter(part.split_psus, dtype=np.int64)
        mask = np.isin(codes, split_set) & (tree.draw.multipliers > 0)
        rows = np.flatnonzero(mask)
        eff = tree.draw.multipliers[rows] / (config.honesty_prob * forest.sample.pi[rows])
        X = forest.sample.X[rows]
        stack = [(tree.root, np.arange(rows.size))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf or idx.size == 0:
                continue
            w_node = guard_node_weights(eff[idx], config.max_weight_ratio)
            max_ratio = max(max_ratio, float(w_node.max() / w_node.min()))
            go_left = X[idx, node.feature] <= node.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
    return {
        "honesty_disjoint": bool(disjoint),
        "psus_covered": bool(covered),
        "max_internal_weight_ratio": max_ratio,
        "max_weight_ratio_bound": float(config.max_weight_ratio),
        "ratio_guard_ok": max_ratio <= config.max_weight_ratio + 1e-9,
    }


# --- serialization -----------------------------------------------------------

def _config_to_dict(config: ForestConfig) -> dict:
    kernel = config.kernel
    return {
        "n_trees": config.n_trees,
        "honesty_prob": config.honesty_prob,
        "max_depth": config.max_depth,
        "min_node_size": config.min_node_size,
        "max_weight_ratio": config.max_weight_ratio,
        "mtry": config.mtry,
        "threshold_grid": config.threshold_grid,
        "rff_dim": config.rff_dim,
        "resampling": config.resampling,
        "master_seed": config.master_seed,
        "kernel": None if kernel is None else {
            "bandwidth": kernel.bandwidth,
            "rff_dim": kernel.rff_dim,
            "rff_seed": kernel.rff_seed,
            "family": kernel.family,
        },
        "bootstrap": {
            "scheme": config.bootstrap.scheme,
            "skip_second_stage": config.bootstrap.skip_second_stage,
            "average_M": config.bootstrap.average_m,
        },
    }


def _config_from_dict(data: dict) -> ForestConfig:
    kernel = data.get("kernel")
    boot = data.get("bootstrap", {})
    return ForestConfig(
        n_trees=int(data["n_trees"]),
        honesty_prob=float(data["honesty_prob"]),
        max_depth=int(data["max_depth"]),
        min_node_size=data["min_node_size"],
        max_weight_ratio=data["max_weight_ratio"],
        mtry=data["mtry"],
        threshold_grid=int(data["threshold_grid"]),
        kernel=None if kernel is None else KernelSpec(**kernel),
        rff_dim=int(data["rff_dim"]),
        bootstrap=BootstrapConfig(
            scheme=boot.get("scheme", "multinomial"),
            skip_second_stage=bool(boot.get("skip_second_stage", False)),
            average_m=int(boot.get("average_M", 1)),
        ),
        resampling=data.get("resampling", "design"),
        master_seed=int(data["master_seed"]),
    )


def forest_to_dict(forest: Forest) -> dict:
    sample = forest.sample
    return {
        "format": FOREST_FORMAT,
        "version": FOREST_VERSION,
        "config": _config_to_dict(forest.config),
        "sample": {
            "indices": sample.indices.tolist(),
            "x": sample.X.tolist(),
            "y": sample.Y.tolist(),
            "pi": sample.pi.tolist(),
            "stratum": sample.stratum.tolist(),
            "psu": sample.psu.tolist(),
            "stage1_pi": None if sample.stage1_pi is None else sample.stage1_pi.tolist(),
        },
        "trees": [
            {
                "multipliers": tree.draw.multipliers.tolist(),
                "scheme": tree.draw.scheme,
                "split_psus": sorted(tree.partition.split_psus),
                "est_psus": sorted(tree.partition.est_psus),
                "root": tree.root.to_dict(),
            }
            for tree in forest.trees
        ],
    }


def forest_from_dict(data: dict) -> Forest:
    if data.get("format") != FOREST_FORMAT:
        raise ValueError("not a forest document")
    if int(data.get("version", -1)) != FOREST_VERSION:
        raise ValueError(f"unsupported forest version: {data.get('version')!r}")
    s = data["sample"]
    sample = SurveySample(
        indices=np.asarray(s["indices"]),
        X=np.asarray(s["x"], dtype=float),
        Y=np.asarray(s["y"], dtype=float),
        pi=np.asarray(s["pi"], dtype=float),
        stratum=np.asarray(s["stratum"]),
        psu=np.asarray(s["psu"]),
        stage1_pi=None if s["stage1_pi"] is None else np.asarray(s["stage1_pi"], dtype=float),
    )
    config = _config_from_dict(data["config"])
    codes = psu_codes(sample.stratum, sample.psu)
    trees = []
    for rec in data["trees"]:
        draw = ResampleDraw(
            multipliers=np.asarray(rec["multipliers"], dtype=float), scheme=rec["scheme"]
        )
        partition = HonestyPartition(
            split_psus=frozenset(int(v) for v in rec["split_psus"]),
            est_psus=frozenset(int(v) for v in rec["est_psus"]),
        )
        root = TreeNode.from_dict(rec["root"])
        trees.append(_attach_est_side(root, sample, draw, partition, config, codes))
    return Forest(config=config, sample=sample, trees=trees)


def save_forest(forest: Forest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(forest_to_dict(forest), fh)


def load_forest(path) -> Forest:
    with open(path, "r", encoding="utf-8") as fh:
        return forest_from_dict(json.load(fh))
