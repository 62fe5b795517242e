import json

import numpy as np
import pytest

from adaptrt.design import Bernoulli
from adaptrt.infer import subgroup_rt
from adaptrt.model import BenefitingSubgroup
from adaptrt.simulate import (
    BiomarkerLaw,
    EffectCurve,
    MethodParams,
    MethodResult,
    PopulationConfig,
    PowerTable,
    StudyCell,
    default_cells,
    generate,
    make_rng_seed,
    method_art,
    method_bonferroni,
    method_oracle,
    method_split,
    power_contribution,
    power_study,
    split_cutoff,
)


class TestEffectCurves:
    @pytest.mark.parametrize("kind", ["linear", "sigmoid"])
    @pytest.mark.parametrize("delta", [0.5, 2.0, 6.0, 12.0])
    def test_zero_at_origin_and_range(self, kind, delta):
        curve = EffectCurve(kind, delta)
        assert curve(0.0) == 0.0
        if kind == "sigmoid":
            grid = np.linspace(-3, 3, 601)
            vals = curve(grid)
            assert np.all(vals > -delta - 1e-12) and np.all(vals < delta + 1e-12)
            assert np.all(np.diff(vals) >= 0)

    def test_sigmoid_matches_formula(self):
        s = np.linspace(-1, 1, 21)
        d = 3.0
        formula = 2 * d * np.exp(d * s) / (1 + np.exp(d * s)) - d
        assert np.allclose(EffectCurve("sigmoid", d)(s), formula, atol=1e-12)

    def test_piecewise(self):
        curve = EffectCurve("piecewise", levels=(-1.0, 0.0, 2.0), breakpoints=(-0.5, 0.5))
        assert curve(np.array([-1.0, 0.0, 1.0])).tolist() == [-1.0, 0.0, 2.0]
        assert curve.zero_crossing == 0.5

    def test_bad_piecewise(self):
        with pytest.raises(ValueError):
            EffectCurve("piecewise", levels=(1.0, 2.0, 3.0), breakpoints=(0.0,))


class TestGenerate:
    def test_null_generator(self):
        ds, pt, truth = generate(PopulationConfig(n=300, tau=EffectCurve("linear", 0.0)), 1)
        assert np.all(pt.effect == 0) and truth.indices.size == 0

    def test_linear_truth(self):
        ds, pt, truth = generate(PopulationConfig(n=2000), 2)
        assert np.array_equal(truth.indices, np.flatnonzero(ds.biomarker > 0))
        assert 0.45 < truth.indices.size / 2000 < 0.55
        assert np.allclose(pt.effect, 6 * ds.biomarker)

    def test_noise_moments(self):
        cfg = PopulationConfig(n=10_000, tau=EffectCurve("linear", 0.0))
        ds, pt, _ = generate(cfg, 3)
        eps = pt.y0 - (ds.biomarker + ds.biomarker**2)
        se_mean = 4 / np.sqrt(10_000)
        se_var = 16 * np.sqrt(2 / 10_000)
        assert abs(eps.mean()) <= 3 * se_mean
        assert abs(eps.var() - 16) <= 3 * se_var

    def test_independent_noise(self):
        ds, pt, _ = generate(PopulationConfig(n=500, shared_noise=False), 4)
        assert not np.allclose(pt.effect, 6 * ds.biomarker)

    def test_observed_outcome(self):
        ds, pt, _ = generate(PopulationConfig(n=100), 5)
        assert np.array_equal(ds.outcome, pt.observed(ds.treatment))
        assert np.all(ds.propensity == 0.2)

    def test_deterministic(self):
        a, _, _ = generate(PopulationConfig(n=50), 9)
        b, _, _ = generate(PopulationConfig(n=50), 9)
        assert np.array_equal(a.outcome, b.outcome)

    @pytest.mark.parametrize(
        "kwargs", [dict(n=0), dict(propensity=1.0), dict(noise_sd=-1.0), dict(mu0="cubic")]
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            PopulationConfig(**kwargs)

    def test_uniform_biomarker(self):
        ds, _, _ = generate(PopulationConfig(n=500, biomarker=BiomarkerLaw("uniform", -1, 1)), 1)
        assert ds.biomarker.min() >= -1 and ds.biomarker.max() <= 1


class TestMethods:
    def setup_method(self):
        self.ds, self.pt, self.truth = generate(PopulationConfig(n=400), 11)
        self.params = MethodParams(M=99)

    def test_oracle_contribution_is_rejection(self):
        res = method_oracle(self.ds, self.truth, self.params, 1)
        assert power_contribution(self.truth, res) == float(res.reject)

    def test_oracle_null_validity(self):
        cfg = PopulationConfig(n=200, tau=EffectCurve("linear", 0.0))
        rejections = 0
        for r in range(200):
            ds, _, _ = generate(cfg, make_rng_seed(17, r))
            # under a null generator S* is empty; test the upper half as a stand-in oracle set
            truth = BenefitingSubgroup(np.flatnonzero(ds.biomarker > 0), 0.0)
            rejections += method_oracle(ds, truth, MethodParams(M=99), make_rng_seed(18, r)).reject
        assert rejections / 200 <= 0.05 + 3 * np.sqrt(0.05 * 0.95 / 200)

    def test_art_is_pipeline(self):
        res = method_art(self.ds, self.truth, self.params, 3)
        assert res.method == "art" and 0 < res.p_value <= 1

    def test_split_deterministic(self):
        a = method_split(self.ds, self.truth, self.params, 4)
        b = method_split(self.ds, self.truth, self.params, 4)
        assert np.array_equal(a.subgroup, b.subgroup) and a.p_value == b.p_value

    def test_split_uses_fold_two_only(self):
        res = method_split(self.ds, self.truth, self.params, 4)
        perm = np.random.default_rng(np.random.SeedSequence([4, 0])).permutation(len(self.ds))
        assert np.isin(res.subgroup, perm[200:]).all()

    def test_split_degenerate_fold(self):
        ds = self.ds.replace(treatment=np.zeros(len(self.ds), int))
        res = method_split(ds, self.truth, self.params, 4)
        assert not res.reject and "degenerate_fold" in res.flags

    def test_split_cutoff_rectification(self):
        s = np.linspace(-2, 2, 200)
        z = np.tile([1, 0], 100)
        y = z * 3 * s
        cut = split_cutoff(s, z, y)
        assert abs(cut) < 0.05

    def test_split_cutoff_all_positive(self):
        s = np.linspace(1, 2, 40)
        z = np.tile([1, 0], 20)
        # the lowest unit has no smaller neighbour, so its rectified estimate is -inf
        assert split_cutoff(s, z, z * 5.0) == s[0]

    def test_bonferroni_single_candidate(self):
        params = MethodParams(M=99, bonferroni_levels=(0.5,))
        res = method_bonferroni(self.ds, self.truth, params, 6)
        sub = np.flatnonzero(self.ds.biomarker > np.quantile(self.ds.biomarker, 0.5))
        single = subgroup_rt(self.ds, Bernoulli(self.ds.propensity), sub, M=99, seed=make_rng_seed(6, 0))
        assert res.p_value == pytest.approx(single.p_value)
        assert res.reject == (single.p_value <= 0.05)

    def test_bonferroni_picks_largest_significant(self):
        res = method_bonferroni(self.ds, self.truth, MethodParams(M=50), 7)
        if res.reject:
            sizes = [np.sum(self.ds.biomarker > q) for q in np.quantile(self.ds.biomarker, np.arange(1, 21) / 20)]
            assert res.subgroup.size in sizes


class TestPowerMetric:
    def test_partial_overlap(self):
        truth = BenefitingSubgroup(np.array([1, 2, 3, 4]), 0.0)
        res = MethodResult("x", np.array([3, 4, 5]), True, 0.01)
        assert power_contribution(truth, res) == 0.5

    def test_no_rejection(self):
        truth = BenefitingSubgroup(np.array([1, 2]), 0.0)
        assert power_contribution(truth, MethodResult("x", np.array([1, 2]), False, 0.5)) == 0.0

    def test_empty_truth(self):
        truth = BenefitingSubgroup(np.empty(0, np.int64), 0.0)
        assert power_contribution(truth, MethodResult("x", np.array([1]), True, 0.01)) == 0.0


class TestPowerStudy:
    def cells(self):
        return [StudyCell(PopulationConfig(n=120, tau=EffectCurve(k, 6.0))) for k in ("linear", "sigmoid")]

    def test_table_shape_and_ranges(self):
        table = power_study(self.cells(), reps=4, seed=1, params=MethodParams(M=39, bonferroni_M=100))
        assert len(table.rows) == 8
        for row in table.rows:
            assert 0 <= row.power <= 1 and row.reps == 4 and row.se >= 0

    def test_reproducible(self):
        params = MethodParams(M=39, bonferroni_M=100)
        a = power_study(self.cells(), ("art", "oracle"), reps=3, seed=2, params=params)
        b = power_study(self.cells(), ("art", "oracle"), reps=3, seed=2, params=params)
        assert a.rows == b.rows

    def test_thread_count_does_not_matter(self):
        params = MethodParams(M=39)
        a = power_study(self.cells(), ("art",), reps=3, seed=5, params=params, threads=1)
        b = power_study(self.cells(), ("art",), reps=3, seed=5, params=params, threads=2)
        assert a.rows == b.rows

    def test_never_rejecting_method(self):
        cells = [StudyCell(PopulationConfig(n=60, tau=EffectCurve("linear", 0.0)))]
        table = power_study(cells, ("oracle",), reps=3, seed=0, params=MethodParams(M=19))
        assert table.rows[0].power == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            power_study(self.cells(), reps=0)
        with pytest.raises(ValueError):
            power_study(self.cells(), ("magic",), reps=1)

    def test_serialisation(self, tmp_path):
        table = power_study(self.cells(), ("oracle",), reps=2, seed=0, params=MethodParams(M=19))
        table.to_csv(tmp_path / "p.csv", tau="linear")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "method,n,delta,tau,power,se,reps"
        assert len(lines) == 2 and lines[1].startswith("oracle,120,6.0,linear,")
        table.to_json(tmp_path / "p.json")
        doc = json.loads((tmp_path / "p.json").read_text())
        assert len(doc["rows"]) == 2 and doc["settings"]["reps"] == 2

    def test_lookup(self):
        table = PowerTable([])
        with pytest.raises(KeyError):
            table.lookup("art")

    def test_default_cells_dedupe(self):
        cells = default_cells(ns=(200, 400), deltas=(2, 6))
        keys = [c.key for c in cells]
        assert len(keys) == len(set(keys)) == 2 * 3
