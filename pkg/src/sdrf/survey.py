"""Finite populations, probability sampling designs, Hájek estimation, and
design diagnostics.

Implemented designs: Poisson, SRSWOR, PPS-systematic, and stratified two-stage
(PPS-systematic selection of PSUs, SRSWOR of units within selected PSUs).
All draws are deterministic given an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from ._rng import derive_rng
from .kernels import WeightedDistribution

__all__ = [
    "FinitePopulation",
    "PoissonDesign",
    "SrsworDesign",
    "PpsSystematicDesign",
    "TwoStageDesign",
    "SurveySample",
    "DesignDiagnostics",
    "ups_systematic",
    "pps_inclusion_probs",
    "draw_sample",
    "hajek_distribution",
    "design_diagnostics",
    "psu_codes",
    "read_sample_csv",
    "write_sample_csv",
    "IncompatibleDesign",
    "EmptySelection",
    "EmptyRegion",
    "InvalidWeights",
    "SchemaError",
]

_MAX_REDRAWS = 100


class IncompatibleDesign(ValueError):
    """Design cannot be applied to this population."""


class EmptySelection(RuntimeError):
    """A draw selected no units (or no PSUs in some stratum)."""


class EmptyRegion(ValueError):
    """No member unit carries positive mass."""


class InvalidWeights(ValueError):
    """Survey weights below 1 (inclusion probabilities above 1)."""


class SchemaError(ValueError):
    """Ingested file violates the required column schema."""


@dataclass(frozen=True)
class FinitePopulation:
    """Universe of N units: covariates X, outcomes Y, design variable Z,
    stratum labels, and PSU labels (unique within stratum)."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    stratum: np.ndarray
    psu: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        Z = np.asarray(self.Z, dtype=float).ravel()
        stratum = np.asarray(self.stratum).ravel()
        psu = np.asarray(self.psu).ravel()
        n = X.shape[0]
        if not (Y.shape[0] == Z.shape[0] == stratum.shape[0] == psu.shape[0] == n):
            raise ValueError("all population arrays must have N rows")
        if n == 0:
            raise ValueError("population is empty")
        for name, arr in (("X", X), ("Y", Y), ("Z", Z), ("stratum", stratum), ("psu", psu)):
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def outcome_dim(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class PoissonDesign:
    """Independent Bernoulli selection with per-unit probabilities."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).ravel()
        if np.any(pi <= 0) or np.any(pi > 1):
            raise ValueError("Poisson probabilities must lie in (0, 1]")
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class SrsworDesign:
    """Simple random sampling of n units without replacement."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sample size must be at least 1")


@dataclass(frozen=True)
class PpsSystematicDesign:
    """Fixed expected count, probability proportional to a size measure,
    selection by Madow systematic sampling on a random permutation."""

    n: float
    size: np.ndarray

    def __post_init__(self):
        size = np.asarray(self.size, dtype=float).ravel()
        if np.any(size <= 0):
            raise ValueError("size measures must be positive")
        if self.n < 1:
            raise ValueError("expected count must be at least 1")
        object.__setattr__(self, "size", size)


@dataclass(frozen=True)
class TwoStageDesign:
    """Stratified two-stage design: PPS-systematic PSU selection within each
    stratum (expected n_psus PSUs per stratum), then SRSWOR of a fraction of
    units within each selected PSU.

    psu_size_measure is a per-unit array carrying each unit's PSU measure of
    size (constant within a PSU); None means size = PSU unit count.
    """

    n_psus: float
    second_stage_fraction: float
    psu_size_measure: np.ndarray | None = None

    def __post_init__(self):
        if self.n_psus < 1:
            raise ValueError("expected PSUs per stratum must be at least 1")
        if not (0 < self.second_stage_fraction <= 1):
            raise ValueError("second-stage fraction must lie in (0, 1]")
        if self.psu_size_measure is not None:
            mos = np.asarray(self.psu_size_measure, dtype=float).ravel()
            if np.any(mos <= 0):
                raise ValueError("PSU size measures must be positive")
            object.__setattr__(self, "psu_size_measure", mos)


@dataclass(frozen=True)
class SurveySample:
    """Selected units with exact first-order inclusion probabilities.

    stage1_pi (per selected unit, the stage-1 probability of its PSU) is
    present only for two-stage samples; then pi = stage1_pi * f2 exactly.
    """

    indices: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    pi: np.ndarray
    stratum: np.ndarray
    psu: np.ndarray
    stage1_pi: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).ravel()
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        pi = np.asarray(self.pi, dtype=float).ravel()
        stratum = np.asarray(self.stratum).ravel()
        psu = np.asarray(self.psu).ravel()
        n = idx.shape[0]
        if not (X.shape[0] == Y.shape[0] == pi.shape[0] == stratum.shape[0] == psu.shape[0] == n):
            raise ValueError("all sample arrays must have n_s rows")
        if n == 0:
            raise EmptySelection("sample contains no units")
        if np.any(pi <= 0) or np.any(pi > 1 + 1e-12):
            raise InvalidWeights("inclusion probabilities must lie in (0, 1]")
        for name, arr in (
            ("indices", idx), ("X", X), ("Y", Y), ("pi", pi),
            ("stratum", stratum), ("psu", psu),
        ):
            object.__setattr__(self, name, arr)
        if self.stage1_pi is not None:
            s1 = np.asarray(self.stage1_pi, dtype=float).ravel()
            if s1.shape[0] != n:
                raise ValueError("stage1_pi must align with selected units")
            if np.any(s1 <= 0) or np.any(s1 > 1 + 1e-12):
                raise InvalidWeights("stage-1 probabilities must lie in (0, 1]")
            object.__setattr__(self, "stage1_pi", s1)

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.pi


@dataclass(frozen=True)
class DesignDiagnostics:
    """Runtime design health checks: design-LLN gap, Kish effective sample
    size, probability range, sampling fraction."""

    lln_gap: float
    n_eff: float
    pi_min: float
    pi_max: float
    sampling_fraction: float


def ups_systematic(pi, seed) -> np.ndarray:
    """Madow systematic selection: boolean indicator with E[xi_i] = pi_i.

    Walks the cumulative sums with a uniform start; units with pi = 1 span a
    full unit interval and are always selected. Selects exactly round(sum(pi))
    units whenever the total is an integer.
    """
    pi = np.asarray(pi, dtype=float).ravel()
    if np.any(pi < 0) or np.any(pi > 1 + 1e-12):
        raise ValueError("probabilities must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "ups")
    cum = np.cumsum(pi)
    total = cum[-1] if pi.size else 0.0
    u = float(rng.uniform())
    out = np.zeros(pi.size, dtype=bool)
    if total <= u:
        return out
    points = u + np.arange(int(np.ceil(total - u)))
    hits = np.searchsorted(cum, points, side="right")
    out[hits[hits < pi.size]] = True
    return out


def pps_inclusion_probs(size, target: float) -> np.ndarray:
    """pi_i = min(1, target * size_i / sum(size)), with certainty units removed
    and the remaining probabilities re-solved so expected counts are preserved."""
    size = np.asarray(size, dtype=float).ravel()
    if np.any(size <= 0):
        raise ValueError("size measures must be positive")
    pi = np.ones(size.size, dtype=float)
    active = np.ones(size.size, dtype=bool)
    remaining = float(target)
    while True:
        if remaining <= 0 or not active.any():
            pi[active] = 0.0
            break
        raw = remaining * size[active] / size[active].sum()
        if np.all(raw < 1.0):
            pi[active] = raw
            break
        certain = np.zeros(size.size, dtype=bool)
        certain[active] = raw >= 1.0
        pi[certain] = 1.0
        remaining -= int(certain.sum())
        active &= ~certain
    return pi


def psu_codes(stratum, psu) -> np.ndarray:
    """Integer codes for composite (stratum, psu) keys; PSU labels are only
    unique within a stratum."""
    s = pd.factorize(np.asarray(stratum).ravel())[0]
    p = pd.factorize(np.asarray(psu).ravel())[0]
    pair = s.astype(np.int64) * (p.max() + 1) + p
    return np.unique(pair, return_inverse=True)[1]


def _draw_once(pop: FinitePopulation, design, rng) -> SurveySample:
    N = pop.size
    if isinstance(design, PoissonDesign):
        if design.pi.shape[0] != N:
            raise IncompatibleDesign("Poisson probability vector must have N entries")
        sel = rng.uniform(size=N) < design.pi
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            raise EmptySelection("Poisson draw selected no units")
        pi = design.pi[idx]
        stage1 = None
    elif isinstance(design, SrsworDesign):
        if design.n > N:
            raise IncompatibleDesign("SRSWOR sample size exceeds population size")
        idx = np.sort(rng.choice(N, size=design.n, replace=False))
        pi = np.full(idx.size, design.n / N)
        stage1 = None
    elif isinstance(design, PpsSystematicDesign):
        if design.size.shape[0] != N:
            raise IncompatibleDesign("size measure must have N entries")
        pi_all = pps_inclusion_probs(design.size, design.n)
        perm = rng.permutation(N)
        sel_perm = ups_systematic(pi_all[perm], rng)
        sel = np.zeros(N, dtype=bool)
        sel[perm] = sel_perm
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            raise EmptySelection("PPS draw selected no units")
        pi = pi_all[idx]
        stage1 = None
    elif isinstance(design, TwoStageDesign):
        return _draw_two_stage(pop, design, rng)
    else:
        raise IncompatibleDesign(f"unknown design: {type(design).__name__}")
    return SurveySample(
        indices=idx, X=pop.X[idx], Y=pop.Y[idx], pi=pi,
        stratum=pop.stratum[idx], psu=pop.psu[idx], stage1_pi=stage1,
    )


def _draw_two_stage(pop: FinitePopulation, design: TwoStageDesign, rng) -> SurveySample:
    f2 = design.second_stage_fraction
    if design.psu_size_measure is not None and design.psu_size_measure.shape[0] != pop.size:
        raise IncompatibleDesign("psu_size_measure must have N entries")
    chosen: list[np.ndarray] = []
    chosen_pi1: list[np.ndarray] = []
    strata = np.unique(pop.stratum)
    for h in strata:
        in_h = np.flatnonzero(pop.stratum == h)
        psus = np.unique(pop.psu[in_h])
        sizes = np.empty(psus.size, dtype=float)
        members = []
        for j, label in enumerate(psus):
            rows = in_h[pop.psu[in_h] == label]
            members.append(rows)
            if design.psu_size_measure is None:
                sizes[j] = rows.size
            else:
                sizes[j] = design.psu_size_measure[rows[0]]
        pi1 = pps_inclusion_probs(sizes, design.n_psus)
        perm = rng.permutation(psus.size)
        sel_perm = ups_systematic(pi1[perm], rng)
        sel = np.zeros(psus.size, dtype=bool)
        sel[perm] = sel_perm
        if not sel.any():
            raise EmptySelection(f"no PSU selected in stratum {h!r}")
        for j in np.flatnonzero(sel):
            rows = members[j]
            take = int(np.ceil(f2 * rows.size))
            sub = np.sort(rng.choice(rows.size, size=take, replace=False))
            chosen.append(rows[sub])
            chosen_pi1.append(np.full(take, pi1[j]))
    idx = np.concatenate(chosen)
    stage1 = np.concatenate(chosen_pi1)
    order = np.argsort(idx, kind="stable")
    idx, stage1 = idx[order], stage1[order]
    return SurveySample(
        indices=idx, X=pop.X[idx], Y=pop.Y[idx], pi=stage1 * f2,
        stratum=pop.stratum[idx], psu=pop.psu[idx], stage1_pi=stage1,
    )


def draw_sample(pop: FinitePopulation, design, seed) -> SurveySample:
    """Draw one probability sample under the design.

    An empty selection (possible under Poisson, or a PSU-less stratum)
    triggers a redraw with a derived seed, capped at 100 attempts.
    """
    for attempt in range(_MAX_REDRAWS):
        rng = derive_rng(seed, "sample-draw", attempt)
        try:
            return _draw_once(pop, design, rng)
        except EmptySelection:
            continue
    raise EmptySelection(f"no nonempty selection in {_MAX_REDRAWS} attempts")


def hajek_distribution(
    sample: SurveySample,
    Y=None,
    member=None,
    multipliers=None,
) -> WeightedDistribution:
    """Ratio-normalized design-weighted law over the member units.

    Weights are proportional to m_i / pi_i (m_i = 1 when multipliers are
    absent), normalized to sum to one. `member` is a boolean mask or an index
    array over selected units; default all.
    """
    Y = sample.Y if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    n = sample.n
    if member is None:
        mask = np.ones(n, dtype=bool)
    else:
        member = np.asarray(member)
        if member.dtype == bool:
            mask = member
        else:
            mask = np.zeros(n, dtype=bool)
            mask[member] = True
    mult = np.ones(n) if multipliers is None else np.asarray(multipliers, dtype=float).ravel()
    if np.any(mult < 0):
        raise ValueError("multipliers must be nonnegative")
    raw = np.where(mask, mult / sample.pi, 0.0)
    total = raw.sum()
    if not total > 0:
        raise EmptyRegion("no member unit carries positive mass")
    keep = raw > 0
    return WeightedDistribution(Y[keep], raw[keep] / total)


def design_diagnostics(sample: SurveySample, population_size: int) -> DesignDiagnostics:
    """LLN gap N^{-1}(sum 1/pi - N), Kish effective size, pi range, n_s/N."""
    w = sample.weights
    return DesignDiagnostics(
        lln_gap=float((w.sum() - population_size) / population_size),
        n_eff=float(w.sum() ** 2 / (w**2).sum()),
        pi_min=float(sample.pi.min()),
        pi_max=float(sample.pi.max()),
        sampling_fraction=float(sample.n / population_size),
    )


# --- CSV ingestion -----------------------------------------------------------
# Required columns: x1..xp, y1..yd, w (= 1/pi), stratum, psu. Optional column
# stage1_pi marks a two-stage sample. Header mandatory, UTF-8, no missing
# values. Unrecognized columns are ignored.

def _indexed_columns(df: pd.DataFrame, prefix: str) -> list[str]:
    nums = []
    for col in df.columns:
        if col.startswith(prefix) and col[len(prefix):].isdigit():
            nums.append(int(col[len(prefix):]))
    if not nums:
        raise SchemaError(f"missing required columns {prefix}1..{prefix}k")
    nums.sort()
    if nums != list(range(1, len(nums) + 1)):
        raise SchemaError(f"{prefix}-columns must be contiguous {prefix}1..{prefix}{len(nums)}")
    return [f"{prefix}{k}" for k in nums]


def read_sample_csv(path) -> SurveySample:
    """Load a survey sample from CSV per the ingestion schema."""
    df = pd.read_csv(path, encoding="utf-8")
    x_cols = _indexed_columns(df, "x")
    y_cols = _indexed_columns(df, "y")
    for col in ("w", "stratum", "psu"):
        if col not in df.columns:
            raise SchemaError(f"missing required column {col!r}")
    used = x_cols + y_cols + ["w", "stratum", "psu"]
    if "stage1_pi" in df.columns:
        used.append("stage1_pi")
    for col in used:
        if df[col].isna().any():
            row = int(df.index[df[col].isna()][0])
            raise SchemaError(f"missing value in column {col!r} at row {row}")
    w = df["w"].to_numpy(dtype=float)
    if np.any(w < 1 - 1e-12):
        raise InvalidWeights("weights below 1 imply inclusion probabilities above 1")
    stage1 = df["stage1_pi"].to_numpy(dtype=float) if "stage1_pi" in used else None
    return SurveySample(
        indices=np.arange(len(df)),
        X=df[x_cols].to_numpy(dtype=float),
        Y=df[y_cols].to_numpy(dtype=float),
        pi=1.0 / np.maximum(w, 1.0),
        stratum=df["stratum"].to_numpy(),
        psu=df["psu"].to_numpy(),
        stage1_pi=stage1,
    )


def write_sample_csv(sample: SurveySample, path) -> None:
    """Write a sample in the ingestion schema (inverse of read_sample_csv)."""
    data: dict[str, np.ndarray] = {}
    for k in range(sample.X.shape[1]):
        data[f"x{k + 1}"] = sample.X[:, k]
    for k in range(sample.Y.shape[1]):
        data[f"y{k + 1}"] = sample.Y[:, k]
    data["w"] = sample.weights
    data["stratum"] = sample.stratum
    data["psu"] = sample.psu
    if sample.stage1_pi is not None:
        data["stage1_pi"] = sample.stage1_pi
    pd.DataFrame(data).to_csv(path, index=False)
