import numpy as np
import pytest

from sdrf.bootstrap import (
    BootstrapConfig,
    MismatchedDraws,
    ResampleDraw,
    average_multipliers,
    build_pseudo_population,
    draw_multipliers,
    iid_multipliers,
)
from sdrf.simbench import SimConfig, apply_survey, generate_population
from sdrf.survey import (
    FinitePopulation,
    PoissonDesign,
    SrsworDesign,
    SurveySample,
    draw_sample,
)


def poisson_sample(n=30, lo=0.05, hi=0.15, seed=0):
    rng = np.random.default_rng(seed)
    pi = rng.uniform(lo, hi, size=200)
    pop = FinitePopulation(
        X=rng.normal(size=(200, 2)), Y=rng.normal(size=(200, 2)),
        Z=rng.normal(size=200), stratum=np.zeros(200, int), psu=np.arange(200),
    )
    return draw_sample(pop, PoissonDesign(pi=pi), seed), PoissonDesign(pi=pi)


def two_stage_sample(seed=0):
    cfg = SimConfig(n_population=900, n_strata=3, psus_per_stratum=30,
                    psus_selected_per_stratum=4, second_stage_fraction=0.5)
    pop = generate_population(cfg, seed)
    return apply_survey(pop, cfg, seed + 1)


def census_sample(n=12):
    rng = np.random.default_rng(3)
    return SurveySample(
        indices=np.arange(n), X=rng.normal(size=(n, 2)), Y=rng.normal(size=(n, 2)),
        pi=np.ones(n), stratum=np.zeros(n, int), psu=np.arange(n),
    )


class TestPseudoPopulation:
    def test_census_reproduces_itself(self):
        sample = census_sample()
        for scheme in ("multinomial", "floor_residual"):
            pseudo = build_pseudo_population(
                sample, None, 0, BootstrapConfig(scheme=scheme)
            )
            assert np.array_equal(pseudo.copies, np.ones(sample.n, dtype=int))
            assert pseudo.total == sample.n

    def test_floor_residual_construction(self):
        # w = 2.5 -> copies in {2, 3} with mean 2.5
        n = 8
        rng = np.random.default_rng(4)
        sample = SurveySample(
            indices=np.arange(n), X=rng.normal(size=(n, 1)), Y=rng.normal(size=(n, 1)),
            pi=np.full(n, 0.4), stratum=np.zeros(n, int), psu=np.arange(n),
        )
        cfg = BootstrapConfig(scheme="floor_residual")
        counts = []
        for k in range(4000):
            pseudo = build_pseudo_population(sample, None, k, cfg)
            assert set(np.unique(pseudo.copies)) <= {2, 3}
            counts.append(pseudo.copies)
        assert np.mean(counts) == pytest.approx(2.5, abs=0.03)

    def test_multinomial_expected_copies(self):
        sample, design = poisson_sample(seed=5)
        w = 1.0 / sample.pi
        acc = np.zeros(sample.n)
        n_draws = 10000
        rows = np.arange(sample.n)
        # one multinomial draw per iteration, accumulated
        for k in range(n_draws):
            pseudo = build_pseudo_population(sample, design, ("copies", k))
            acc += pseudo.copies
        mean = acc / n_draws
        assert np.all(np.abs(mean / w - 1.0) <= 0.02)

    def test_certainty_units_single_copy(self):
        rng = np.random.default_rng(6)
        n = 10
        pi = np.concatenate([np.ones(3), rng.uniform(0.1, 0.5, n - 3)])
        sample = SurveySample(
            indices=np.arange(n), X=rng.normal(size=(n, 1)), Y=rng.normal(size=(n, 1)),
            pi=pi, stratum=np.zeros(n, int), psu=np.arange(n),
        )
        for k in range(50):
            pseudo = build_pseudo_population(sample, None, k)
            assert np.all(pseudo.copies[:3] == 1)

    def test_two_stage_blocks(self):
        sample = two_stage_sample()
        pseudo = build_pseudo_population(sample, None, 0)
        assert pseudo.blocks is not None
        assert pseudo.total == int(pseudo.copies.sum())
        assert sum(pseudo.stratum_totals.values()) == pseudo.total


class TestDrawMultipliers:
    def test_census_multipliers_one(self):
        sample = census_sample()
        pseudo = build_pseudo_population(sample, None, 0)
        for k in range(20):
            draw = draw_multipliers(pseudo, sample, None, k)
            assert np.allclose(draw.multipliers, 1.0)

    def test_poisson_w2_floor_residual(self):
        # w = 2 -> c = 2 deterministically; n* = s / (2 * 0.5) = s in {0,1,2}
        n = 10
        rng = np.random.default_rng(7)
        sample = SurveySample(
            indices=np.arange(n), X=rng.normal(size=(n, 1)), Y=rng.normal(size=(n, 1)),
            pi=np.full(n, 0.5), stratum=np.zeros(n, int), psu=np.arange(n),
        )
        cfg = BootstrapConfig(scheme="floor_residual")
        pseudo = build_pseudo_population(sample, None, 0, cfg)
        assert np.all(pseudo.copies == 2)
        values = []
        for k in range(4000):
            draw = draw_multipliers(pseudo, sample, None, ("w2", k), cfg)
            values.append(draw.multipliers)
        values = np.asarray(values)
        assert set(np.unique(values)) <= {0.0, 1.0, 2.0}
        assert np.abs(values.mean(axis=0) - 1.0).max() <= 0.06

    def test_r2_centering_poisson(self):
        sample, design = poisson_sample(seed=8)
        self._check_centering(sample, design, n_draws=4000)

    def test_r2_centering_srswor(self):
        rng = np.random.default_rng(9)
        pop = FinitePopulation(
            X=rng.normal(size=(160, 2)), Y=rng.normal(size=(160, 2)),
            Z=rng.normal(size=160), stratum=np.zeros(160, int), psu=np.arange(160),
        )
        design = SrsworDesign(n=20)
        sample = draw_sample(pop, design, 9)
        self._check_centering(sample, design, n_draws=4000)

    def test_r2_centering_two_stage(self):
        sample = two_stage_sample(seed=11)
        self._check_centering(sample, None, n_draws=3000)

    @staticmethod
    def _check_centering(sample, design, n_draws, scheme="multinomial"):
        cfg = BootstrapConfig(scheme=scheme)
        acc = np.zeros(sample.n)
        acc2 = np.zeros(sample.n)
        for k in range(n_draws):
            pseudo = build_pseudo_population(sample, design, ("r2-pseudo", k), cfg)
            draw = draw_multipliers(pseudo, sample, design, ("r2-draw", k), cfg)
            acc += draw.multipliers
            acc2 += draw.multipliers**2
        mean = acc / n_draws
        se = np.sqrt(np.maximum(acc2 / n_draws - mean**2, 1e-12) / n_draws)
        assert np.abs(mean - 1.0).max() <= (3.2 * se + 5e-3).max()

    def test_r3_weak_dependence_proxy(self):
        sample, design = poisson_sample(seed=13)
        cfg = BootstrapConfig()
        pseudo = build_pseudo_population(sample, design, 0, cfg)
        draws = np.stack(
            [draw_multipliers(pseudo, sample, design, ("r3", k), cfg).multipliers
             for k in range(2500)]
        )
        cov = np.cov(draws.T)
        off_diag = np.abs(cov - np.diag(np.diag(cov))).sum()
        assert off_diag <= 5.0 * np.trace(cov)

    def test_certainty_units_always_one(self):
        rng = np.random.default_rng(14)
        n = 12
        pi = np.concatenate([np.ones(4), rng.uniform(0.08, 0.2, n - 4)])
        sample = SurveySample(
            indices=np.arange(n), X=rng.normal(size=(n, 1)), Y=rng.normal(size=(n, 1)),
            pi=pi, stratum=np.zeros(n, int), psu=np.arange(n),
        )
        design = PoissonDesign(pi=pi)
        for k in range(200):
            pseudo = build_pseudo_population(sample, design, ("cert", k))
            draw = draw_multipliers(pseudo, sample, design, ("cert-d", k))
            assert np.allclose(draw.multipliers[:4], 1.0)

    def test_determinism(self):
        sample = two_stage_sample(seed=15)
        a = build_pseudo_population(sample, None, 21)
        b = build_pseudo_population(sample, None, 21)
        assert np.array_equal(a.copies, b.copies)
        da = draw_multipliers(a, sample, None, 22)
        db = draw_multipliers(b, sample, None, 22)
        assert np.array_equal(da.multipliers, db.multipliers)

    def test_skip_second_stage(self):
        sample = two_stage_sample(seed=16)
        cfg = BootstrapConfig(skip_second_stage=True)
        pseudo = build_pseudo_population(sample, None, 0, cfg)
        draw = draw_multipliers(pseudo, sample, None, 1, cfg)
        assert draw.multipliers.shape == (sample.n,)
        assert np.any(draw.multipliers > 0)


class TestAverageMultipliers:
    def test_identity_at_one(self):
        draw = iid_multipliers(10, 0)
        assert average_multipliers([draw]) is draw

    def test_census_average_is_one(self):
        sample = census_sample()
        pseudo = build_pseudo_population(sample, None, 0)
        draws = [draw_multipliers(pseudo, sample, None, k) for k in range(5)]
        avg = average_multipliers(draws)
        assert np.allclose(avg.multipliers, 1.0)

    def test_variance_scales_inversely_with_m(self):
        sample, design = poisson_sample(seed=17)
        cfg = BootstrapConfig()
        pseudo = build_pseudo_population(sample, design, 0, cfg)

        def draw_avg(m, rep):
            draws = [
                draw_multipliers(pseudo, sample, design, ("avg", rep, j), cfg)
                for j in range(m)
            ]
            return average_multipliers(draws).multipliers

        singles = np.stack([draw_avg(1, r) for r in range(1000)])
        averaged = np.stack([draw_avg(4, r + 5000) for r in range(1000)])
        var1 = singles.var(axis=0).mean()
        var4 = averaged.var(axis=0).mean()
        assert var1 / var4 == pytest.approx(4.0, rel=0.25)

    def test_mismatched(self):
        with pytest.raises(MismatchedDraws):
            average_multipliers([iid_multipliers(5, 0), iid_multipliers(6, 0)])
        with pytest.raises(MismatchedDraws):
            average_multipliers([])


class TestIidMultipliers:
    def test_single_unit(self):
        draw = iid_multipliers(1, 0)
        assert np.array_equal(draw.multipliers, [1.0])

    def test_total_preserved(self):
        for k in range(50):
            draw = iid_multipliers(37, k)
            assert draw.multipliers.sum() == pytest.approx(37.0)
            assert draw.scheme == "iid_multinomial"

    def test_mean_one(self):
        n_draws = 40000
        acc = np.zeros(25)
        for k in range(n_draws):
            acc += iid_multipliers(25, k).multipliers
        assert np.abs(acc / n_draws - 1.0).max() <= 0.02


class TestResampleDraw:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            ResampleDraw(multipliers=np.array([-0.1, 1.0]), scheme="design_bootstrap")

    def test_rejects_all_zero(self):
        with pytest.raises(Exception):
            ResampleDraw(multipliers=np.zeros(3), scheme="design_bootstrap")
