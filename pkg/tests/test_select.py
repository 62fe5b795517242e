import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptrt.model import Dataset
from adaptrt.select import (
    AdaptiveConfig,
    PositiveEstimate,
    SelectionAuditError,
    SelectionConfig,
    SelectionOutcome,
    ZScore,
    config_from_dict,
    select_adaptive,
    select_arc,
    select_cutoff,
    select_multi,
    selector_for,
    verify_self_contained,
)
from adaptrt.simulate import EffectCurve, PopulationConfig, generate
from conftest import make_dataset


def sorted_dataset(tau_by_batch, batch=4):
    """Dataset whose batch-wise Hajek estimates equal ``tau_by_batch`` exactly."""
    n = batch * len(tau_by_batch)
    z = np.tile([1, 1, 0, 0], n // 4)
    y = np.zeros(n)
    for j, t in enumerate(tau_by_batch):
        y[j * batch : j * batch + 2] = t  # two treated, sum(e) = 2: estimate is t
    return Dataset(np.arange(n), np.arange(n, dtype=float), z, y, np.full(n, 0.5))


class TestSelectionConfig:
    def test_batch_size_boundaries(self):
        assert SelectionConfig(batch_size=4).boundaries(10) == [(0, 4), (4, 10)]

    def test_default_cube_root(self):
        b = SelectionConfig().boundaries(1000)
        assert len(b) == 10 and b[-1][1] == 1000

    def test_batch_size_exceeds_n(self):
        with pytest.raises(ValueError):
            SelectionConfig(batch_size=11).boundaries(10)

    @pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(batch_size=2, batch_count=2), dict(direction="down")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SelectionConfig(**kwargs)

    def test_from_dict(self):
        cfg = config_from_dict({"batch_size": 20, "rule": {"kind": "zscore", "level": 0.05}, "direction": "arc"})
        assert cfg.rule == ZScore(0.05) and cfg.direction == "arc"

    @pytest.mark.parametrize("spec", [{"size": 3}, {"rule": {"kind": "magic"}}, {"rule": {"kind": "positive", "level": 1}}])
    def test_from_dict_rejects(self, spec):
        with pytest.raises(ValueError):
            config_from_dict(spec)


class TestSelectCutoff:
    def test_never_stops(self):
        ds = sorted_dataset([-1, -2, -3])
        out = select_cutoff(ds, SelectionConfig(batch_size=4))
        assert out.subgroup.size == 0
        assert out.cutoff == ds.biomarker.max()
        assert "never_stopped" in out.flags

    def test_immediate_stop(self):
        ds = sorted_dataset([1, -2, -3])
        out = select_cutoff(ds, SelectionConfig(batch_size=4))
        assert out.cutoff == 3.0
        assert out.subgroup.tolist() == list(range(4, 12))
        assert len(out.trail) == 1

    def test_stops_at_first_positive(self):
        ds = sorted_dataset([-1, -2, 0.5, 3, -1])
        out = select_cutoff(ds, SelectionConfig(batch_size=4))
        assert [t.estimate for t in out.trail] == pytest.approx([-1, -2, 0.5])
        assert out.cutoff == 11.0
        assert out.revealed.tolist() == list(range(12))

    def test_threshold_rule(self):
        ds = sorted_dataset([-1, 0.5, 3, -1])
        out = select_cutoff(ds, SelectionConfig(batch_size=4, rule=PositiveEstimate(1.0)))
        assert out.cutoff == 11.0

    def test_zero_estimate_does_not_stop(self):
        ds = sorted_dataset([0.0, 0.0])
        assert not select_cutoff(ds, SelectionConfig(batch_size=4)).stopped

    def test_zscore_rule(self):
        rng = np.random.default_rng(0)
        n = 200
        s = np.sort(rng.normal(size=n))
        z = rng.integers(0, 2, n)
        y = z * 5.0 * (s > 0) + rng.normal(0, 0.5, n)
        ds = Dataset(np.arange(n), s, z, y, np.full(n, 0.5))
        out = select_cutoff(ds, SelectionConfig(batch_size=20, rule=ZScore(0.1)))
        assert abs(out.cutoff) < 0.6

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), batch=st.integers(3, 15))
    def test_trail_invariants(self, seed, batch):
        ds = make_dataset(n=60, seed=seed, effect=lambda s: 3 * s)
        cfg = SelectionConfig(batch_size=batch)
        out = select_cutoff(ds, cfg)
        assert len(out.trail) <= len(cfg.boundaries(60))
        assert out.revealed.size == sum(b - a for a, b in cfg.boundaries(60)[: len(out.trail)])
        assert np.intersect1d(out.revealed, out.subgroup).size == 0
        if out.stopped:
            assert out.cutoff == out.trail[-1].max_biomarker
            assert np.array_equal(out.subgroup, np.flatnonzero(ds.biomarker > out.cutoff))
            revealed_max = ds.biomarker[out.revealed].max()
            assert revealed_max == out.cutoff

    def test_linear_effect_cutoff_accuracy(self):
        cfg = PopulationConfig(n=400, tau=EffectCurve("linear", 6.0))
        errors = []
        for r in range(400):
            ds, _, truth = generate(cfg, np.random.SeedSequence([99, r]))
            errors.append(abs(select_cutoff(ds, SelectionConfig(batch_size=20)).cutoff - 0.0))
        assert np.median(errors) < 0.35


def arc_dataset(n, seed, noise=0.5):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-2, 2, n)
    z = (rng.random(n) < 0.5).astype(int)
    y = z * (1 - s**2) + rng.normal(0, noise, n)
    return Dataset(np.arange(n), s, z, y, np.full(n, 0.5))


class TestSelectArc:
    def test_recovers_both_zero_crossings(self):
        out = select_arc(arc_dataset(20_000, 1), SelectionConfig())
        lo, hi = out.cutoffs
        assert lo == pytest.approx(-1, abs=0.3) and hi == pytest.approx(1, abs=0.3)
        s = arc_dataset(20_000, 1).biomarker
        assert np.array_equal(out.subgroup, np.flatnonzero((s > lo) & (s < hi)))

    def test_monotone_increasing_effect(self):
        # the flipped pass meets strongly positive estimates at the top at once,
        # so the upper cutoff is the smallest biomarker of the top batch
        rng = np.random.default_rng(3)
        n = 400
        s = rng.uniform(-2, 2, n)
        z = (rng.random(n) < 0.5).astype(int)
        y = z * 3 * s + rng.normal(0, 0.3, n)
        ds = Dataset(np.arange(n), s, z, y, np.full(n, 0.5))
        cfg = SelectionConfig(batch_size=20)
        out = select_arc(ds, cfg)
        lower = select_cutoff(ds, cfg)
        top = np.sort(s)[-20:]
        assert out.cutoffs == (lower.cutoff, top.min())
        assert np.array_equal(out.subgroup, np.flatnonzero((s > lower.cutoff) & (s < top.min())))

    def test_crossed_cutoffs(self):
        # one batch holding every unit with a positive estimate: both passes
        # stop at once, at opposite ends of the biomarker range
        n = 6
        ds = Dataset(np.arange(n), np.arange(n, dtype=float), np.tile([1, 0], 3), np.tile([1.0, 0.0], 3), np.full(n, 0.5))
        out = select_arc(ds, SelectionConfig(batch_size=4))
        assert out.cutoffs == (5.0, 0.0)
        assert out.subgroup.size == 0 and "crossed" in out.flags

    def test_self_contained(self):
        ds = arc_dataset(300, 5)
        assert verify_self_contained(lambda d: select_arc(d, SelectionConfig(batch_size=20)), ds, trials=10)


class TestSelectMulti:
    def test_duplicated_marker(self):
        ds = make_dataset(n=100, seed=2, effect=lambda s: 2 * s)
        ds = ds.replace(covariates=ds.biomarker[:, None])
        cfg = SelectionConfig(batch_size=10)
        assert np.array_equal(select_multi(ds, cfg).subgroup, select_cutoff(ds, cfg).subgroup)

    def test_quadrant(self):
        rng = np.random.default_rng(4)
        n = 8000
        s1, s2 = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
        z = (rng.random(n) < 0.5).astype(int)
        effect = np.where((s1 > 0) & (s2 > 0), 3.0, -3.0)
        y = z * effect + rng.normal(0, 0.5, n)
        ds = Dataset(np.arange(n), s1, z, y, np.full(n, 0.5), covariates=s2[:, None])
        out = select_multi(ds, SelectionConfig(batch_size=200))
        quadrant = np.flatnonzero((s1 > 0) & (s2 > 0))
        # the marginal effect of one marker is positive only once the other has
        # enough mass in its positive half, so each cutoff lands at or above 0
        assert out.subgroup.size > 0
        assert np.isin(out.subgroup, quadrant).mean() >= 0.95
        lo = min(out.cutoffs)
        assert -0.15 < lo

    def test_audit_rejects_leaky_pass(self):
        def leaky(ds, cfg):
            base = select_cutoff(ds, cfg)
            return SelectionOutcome(base.cutoff, np.arange(len(ds)), base.trail, base.revealed)

        ds = make_dataset(n=60, seed=1, covariates=np.arange(60.0)[:, None], effect=lambda s: 2 * s)
        with pytest.raises(SelectionAuditError):
            select_multi(ds, SelectionConfig(batch_size=10), single_pass=leaky)

    def test_needs_two_markers(self):
        with pytest.raises(ValueError):
            select_multi(make_dataset(n=20))


class TestSelectAdaptive:
    def test_zero_effect_never_stops(self):
        rng = np.random.default_rng(0)
        n = 200
        x = rng.normal(size=(n, 2))
        z = (rng.random(n) < 0.5).astype(int)
        # a strongly negative constant effect: every batch estimate is negative
        y = -5.0 * z + rng.normal(0, 0.1, n)
        ds = Dataset(np.arange(n), x[:, 0], z, y, np.full(n, 0.5), covariates=x)
        out = select_adaptive(ds, AdaptiveConfig(batch_size=20))
        assert out.subgroup.size == 0 and "never_stopped" in out.flags

    def test_init_fraction_one(self):
        ds = make_dataset(n=30, covariates=np.arange(30.0)[:, None])
        out = select_adaptive(ds, AdaptiveConfig(init_fraction=1.0))
        assert out.subgroup.size == 0 and out.revealed.size == 30

    def test_needs_covariates(self):
        with pytest.raises(ValueError):
            select_adaptive(make_dataset(n=30))

    @pytest.mark.parametrize("kwargs", [dict(init_fraction=0.0), dict(init="random"), dict(init="greedy")])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            AdaptiveConfig(**kwargs)

    def test_arm_empty_flagged(self):
        n = 40
        s = np.arange(n, dtype=float)
        # the systematic seed set (every 5th unit) is all control
        z = ((np.arange(n) % 5 != 0) & (np.arange(n) % 2 == 1)).astype(int)
        ds = Dataset(np.arange(n), s, z, z * (s - 20.0), np.full(n, 0.5), covariates=s[:, None])
        out = select_adaptive(ds, AdaptiveConfig(init_fraction=0.2, batch_size=5))
        assert out.trail[0].note == "arm_empty"

    def test_overlap_close_to_fixed_biomarker(self):
        cfg = PopulationConfig(n=400, tau=EffectCurve("linear", 6.0), covariate_is_biomarker=True)
        adaptive, fixed = [], []
        for r in range(40):
            ds, _, truth = generate(cfg, np.random.SeedSequence([7, r]))
            denom = truth.indices.size
            a = select_adaptive(ds, AdaptiveConfig(batch_size=20)).subgroup
            b = select_cutoff(ds, SelectionConfig(batch_size=20)).subgroup
            adaptive.append(np.intersect1d(a, truth.indices).size / denom)
            fixed.append(np.intersect1d(b, truth.indices).size / denom)
        assert abs(np.mean(adaptive) - np.mean(fixed)) <= 0.10

    def test_random_init_reproducible(self):
        ds = make_dataset(n=80, seed=3, covariates=np.random.default_rng(1).normal(size=(80, 2)), effect=lambda s: s)
        cfg = AdaptiveConfig(init="random", seed=5, batch_size=10)
        assert np.array_equal(select_adaptive(ds, cfg).subgroup, select_adaptive(ds, cfg).subgroup)


def leaky_selector(ds):
    """Drops the lowest selected unit when the highest one is treated."""
    out = select_cutoff(ds, SelectionConfig(batch_size=10))
    if out.subgroup.size > 1 and ds.treatment[out.subgroup[np.argmax(ds.biomarker[out.subgroup])]] == 1:
        keep = out.subgroup[ds.biomarker[out.subgroup] > ds.biomarker[out.subgroup].min()]
        return SelectionOutcome(out.cutoff, keep, out.trail, out.revealed)
    return out


class TestVerifySelfContained:
    @pytest.mark.parametrize("direction", ["increasing", "arc", "multi"])
    def test_selectors_pass(self, direction):
        ds = make_dataset(n=120, seed=8, effect=lambda s: 2 * s, covariates=np.random.default_rng(2).normal(size=(120, 1)))
        sel = selector_for(SelectionConfig(batch_size=10, direction=direction))
        assert verify_self_contained(sel, ds, trials=10, seed=1)

    def test_adaptive_passes(self):
        ds = make_dataset(n=120, seed=8, effect=lambda s: 2 * s, covariates=np.random.default_rng(2).normal(size=(120, 2)))
        assert verify_self_contained(lambda d: select_adaptive(d, AdaptiveConfig(batch_size=10)), ds, trials=10)

    def test_negative_control(self):
        ds = make_dataset(n=120, seed=8, effect=lambda s: 2 * s)
        check = verify_self_contained(leaky_selector, ds, trials=20)
        assert not check
        assert check.witness is not None
        base = leaky_selector(ds)
        assert not np.array_equal(leaky_selector(ds.replace(treatment=check.witness)).subgroup, base.subgroup)

    def test_empty_subgroup_vacuous(self):
        ds = sorted_dataset([-1, -1])
        check = verify_self_contained(lambda d: select_cutoff(d, SelectionConfig(batch_size=4)), ds)
        assert check and check.trials == 0
