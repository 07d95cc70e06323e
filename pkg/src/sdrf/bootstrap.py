"""Design-aware pseudo-population bootstrap.

The resampling clones sampled units into a synthetic population with expected
size sum(1/pi) and re-applies the original design to it. A unit's multiplier
is its selected-clone count divided by the exact conditional expectation of
that count given the realized pseudo population, so multipliers are centered
at one by construction wherever the unit is represented. Two-stage samples are
rebuilt PSU-first: PSU clones carry stage-1 weights, units inside each clone
carry stage-2 weights, and each stratum is resampled separately.

Also provides the i.i.d. multinomial multipliers used by the design-ignoring
forest baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import derive_rng
from .survey import (
    InvalidWeights,
    PoissonDesign,
    PpsSystematicDesign,
    SrsworDesign,
    SurveySample,
    TwoStageDesign,
    pps_inclusion_probs,
    ups_systematic,
)

__all__ = [
    "BootstrapConfig",
    "PseudoPopulation",
    "ResampleDraw",
    "build_pseudo_population",
    "draw_multipliers",
    "average_multipliers",
    "iid_multipliers",
    "DegenerateDraw",
    "MismatchedDraws",
]

_MAX_REDRAWS = 100
_CERTAINTY_TOL = 1e-12


class DegenerateDraw(RuntimeError):
    """Every multiplier came out zero, repeatedly."""


class MismatchedDraws(ValueError):
    """Draws to be averaged do not share unit sets or schemes."""


@dataclass(frozen=True)
class BootstrapConfig:
    """Configuration keys: scheme in {multinomial, floor_residual},
    skip_second_stage, average_m (resampling draws averaged per tree)."""

    scheme: str = "multinomial"
    skip_second_stage: bool = False
    average_m: int = 1

    def __post_init__(self):
        if self.scheme not in ("multinomial", "floor_residual"):
            raise ValueError(f"unknown bootstrap scheme: {self.scheme!r}")
        if self.average_m < 1:
            raise ValueError("average_m must be at least 1")


@dataclass(frozen=True)
class PsuBlock:
    """One pseudo-PSU clone: sampled units of the source PSU with their
    within-clone copy counts."""

    stratum_code: int
    stage1_pi: float
    second_stage_fraction: float
    unit_idx: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class PseudoPopulation:
    """Cloned-unit bookkeeping; blocks is None for single-stage samples."""

    copies: np.ndarray
    total: int
    stratum_totals: dict
    blocks: tuple | None = None

    def __post_init__(self):
        copies = np.asarray(self.copies, dtype=np.int64).ravel()
        if np.any(copies < 0):
            raise ValueError("copy counts must be nonnegative")
        object.__setattr__(self, "copies", copies)


@dataclass(frozen=True)
class ResampleDraw:
    """Per-unit nonnegative multipliers n*, one draw per tree."""

    multipliers: np.ndarray
    scheme: str
    seed: object = None

    def __post_init__(self):
        m = np.asarray(self.multipliers, dtype=float).ravel()
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("multipliers must be finite and nonnegative")
        if not np.any(m > 0):
            raise DegenerateDraw("all multipliers are zero")
        object.__setattr__(self, "multipliers", m)


def _clone_counts(weights: np.ndarray, scheme: str, rng) -> np.ndarray:
    """Copy counts with expectation == weights; weight-1 entries stay at 1."""
    counts = np.ones(weights.size, dtype=np.int64)
    free = weights > 1.0 + _CERTAINTY_TOL
    if not free.any():
        return counts
    w = weights[free]
    if scheme == "floor_residual":
        base = np.floor(w)
        counts[free] = (base + (rng.uniform(size=w.size) < (w - base))).astype(np.int64)
    else:
        total = int(np.round(w.sum()))
        counts[free] = rng.multinomial(total, w / w.sum())
    return counts


def _two_stage_groups(sample: SurveySample):
    """Per-stratum list of (stage1_pi, f2, unit row indices) per selected PSU."""
    from .survey import psu_codes

    codes = psu_codes(sample.stratum, sample.psu)
    strata, stratum_codes = np.unique(sample.stratum, return_inverse=True)
    groups: list[tuple[int, float, float, np.ndarray]] = []
    for code in np.unique(codes):
        rows = np.flatnonzero(codes == code)
        pi1 = sample.stage1_pi[rows]
        if np.ptp(pi1) > 1e-9:
            raise ValueError("stage-1 probability must be constant within a PSU")
        f2 = sample.pi[rows] / pi1
        if np.ptp(f2) > 1e-9:
            raise ValueError("second-stage fraction must be constant within a PSU")
        groups.append((int(stratum_codes[rows[0]]), float(pi1[0]), float(f2[0]), rows))
    return groups


def build_pseudo_population(
    sample: SurveySample,
    design=None,
    seed=0,
    config: BootstrapConfig = BootstrapConfig(),
) -> PseudoPopulation:
    """Clone sampled units into a pseudo finite population of expected size
    sum(1/pi).

    Single-stage: per-unit counts with expectation 1/pi ("multinomial" splits
    round(sum w) copies with probabilities w/sum w; "floor_residual" draws
    floor(w) + Bernoulli(frac w)); units with pi = 1 always keep exactly one
    copy. Two-stage: PSUs are cloned first with stage-1 weights, then units
    within every PSU clone with stage-2 weights, stratum by stratum.
    """
    if np.any(sample.pi > 1 + _CERTAINTY_TOL):
        raise InvalidWeights("weights below 1 are not valid")
    rng = derive_rng(seed, "pseudo-population")
    two_stage = sample.stage1_pi is not None or isinstance(design, TwoStageDesign)
    if two_stage and sample.stage1_pi is None:
        raise ValueError("two-stage bootstrap needs stage1_pi on the sample")

    if not two_stage:
        copies = _clone_counts(1.0 / sample.pi, config.scheme, rng)
        totals = {"all": int(copies.sum())}
        return PseudoPopulation(copies=copies, total=int(copies.sum()), stratum_totals=totals)

    groups = _two_stage_groups(sample)
    stratum_ids = sorted({g[0] for g in groups})
    blocks: list[PsuBlock] = []
    copies = np.zeros(sample.n, dtype=np.int64)
    totals: dict[int, int] = {}
    for h in stratum_ids:
        in_h = [g for g in groups if g[0] == h]
        w1 = np.array([1.0 / g[1] for g in in_h])
        n_clones = _clone_counts(w1, config.scheme, rng)
        stratum_total = 0
        for (_, pi1, f2, rows), k in zip(in_h, n_clones):
            w2 = np.full(rows.size, 1.0 / f2)
            for _ in range(int(k)):
                c = _clone_counts(w2, config.scheme, rng)
                blocks.append(
                    PsuBlock(
                        stratum_code=h, stage1_pi=pi1, second_stage_fraction=f2,
                        unit_idx=rows, counts=c,
                    )
                )
                np.add.at(copies, rows, c)
                stratum_total += int(c.sum())
        totals[h] = stratum_total
    return PseudoPopulation(
        copies=copies, total=int(copies.sum()), stratum_totals=totals, blocks=tuple(blocks)
    )


def _redraw_single_stage(pseudo, sample, design, rng, config):
    copies = pseudo.copies
    if isinstance(design, SrsworDesign):
        total = int(copies.sum())
        take = min(design.n, total)
        s = rng.multivariate_hypergeometric(copies, take).astype(float)
        expected = copies * (take / total)
    elif isinstance(design, PpsSystematicDesign):
        sizes = design.size[sample.indices]
        rep_unit = np.repeat(np.arange(sample.n), copies)
        pi_clone = pps_inclusion_probs(np.repeat(sizes, copies), design.n)
        perm = rng.permutation(rep_unit.size)
        sel = np.zeros(rep_unit.size, dtype=bool)
        sel[perm] = ups_systematic(pi_clone[perm], rng)
        s = np.bincount(rep_unit[sel], minlength=sample.n).astype(float)
        expected = np.bincount(rep_unit, weights=pi_clone, minlength=sample.n)
    else:
        # Poisson, also the design-agnostic default for ingested samples:
        # every clone kept independently with the unit's original probability
        s = rng.binomial(copies, sample.pi).astype(float)
        expected = copies * sample.pi
    return s, expected


def _redraw_two_stage(pseudo, sample, rng, config):
    blocks = pseudo.blocks
    s = np.zeros(sample.n)
    expected = np.zeros(sample.n)
    stratum_of = np.array([b.stratum_code for b in blocks])
    pi1 = np.array([b.stage1_pi for b in blocks])
    selected = np.zeros(len(blocks), dtype=bool)
    for h in np.unique(stratum_of):
        rows = np.flatnonzero(stratum_of == h)
        perm = rng.permutation(rows.size)
        hit = np.zeros(rows.size, dtype=bool)
        hit[perm] = ups_systematic(pi1[rows][perm], rng)
        selected[rows[hit]] = True
    for keep, block in zip(selected, blocks):
        t_g = int(block.counts.sum())
        if t_g == 0:
            continue
        if config.skip_second_stage:
            ratio = 1.0
            if keep:
                np.add.at(s, block.unit_idx, block.counts.astype(float))
        else:
            n2 = min(int(np.ceil(block.second_stage_fraction * t_g)), t_g)
            ratio = n2 / t_g
            if keep:
                sub = rng.multivariate_hypergeometric(block.counts, n2).astype(float)
                np.add.at(s, block.unit_idx, sub)
        np.add.at(expected, block.unit_idx, block.stage1_pi * ratio * block.counts)
    return s, expected


def draw_multipliers(
    pseudo: PseudoPopulation,
    sample: SurveySample,
    design=None,
    seed=0,
    config: BootstrapConfig = BootstrapConfig(),
) -> ResampleDraw:
    """Re-apply the design to the pseudo population and normalize.

    n*_i = s_i / E[s_i | pseudo population], where s_i counts unit i's clones
    selected in the re-draw; n*_i = 0 for units with no clones. An all-zero
    draw is retried with a derived seed, capped at 100 attempts.
    """
    two_stage = pseudo.blocks is not None
    for attempt in range(_MAX_REDRAWS):
        rng = derive_rng(seed, "bootstrap-redraw", attempt)
        if two_stage:
            s, expected = _redraw_two_stage(pseudo, sample, rng, config)
        else:
            s, expected = _redraw_single_stage(pseudo, sample, design, rng, config)
        mult = np.divide(s, expected, out=np.zeros_like(s), where=expected > 0)
        if np.any(mult > 0):
            return ResampleDraw(multipliers=mult, scheme="design_bootstrap", seed=seed)
    raise DegenerateDraw(f"all-zero multipliers in {_MAX_REDRAWS} attempts")


def average_multipliers(draws) -> ResampleDraw:
    """Average M conditionally independent draws: n̄*_i = mean_b n*_{b,i}."""
    draws = list(draws)
    if not draws:
        raise MismatchedDraws("need at least one draw")
    if len(draws) == 1:
        return draws[0]
    n = draws[0].multipliers.size
    scheme = draws[0].scheme
    for d in draws[1:]:
        if d.multipliers.size != n or d.scheme != scheme:
            raise MismatchedDraws("draws must share unit sets and schemes")
    stacked = np.stack([d.multipliers for d in draws])
    return ResampleDraw(multipliers=stacked.mean(axis=0), scheme=scheme, seed=draws[0].seed)


def iid_multipliers(n_units: int, seed) -> ResampleDraw:
    """Efron-style multinomial multipliers (mean 1, total exactly n_units),
    the resampling of the design-ignoring baseline."""
    if n_units < 1:
        raise ValueError("need at least one unit")
    rng = derive_rng(seed, "iid-multipliers")
    counts = rng.multinomial(n_units, np.full(n_units, 1.0 / n_units)).astype(float)
    return ResampleDraw(multipliers=counts, scheme="iid_multinomial", seed=seed)
