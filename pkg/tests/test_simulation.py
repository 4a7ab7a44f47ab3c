import json
import math

import numpy as np
import pytest

from clusterics.data import Dataset, estimand_oracle
from clusterics.errors import InvalidParams, InvalidScenario
from clusterics.numstats import RngStream
from clusterics.simulation import (
    CSV_FIELDS,
    SimulationScenario,
    expected_contrasts_sim3,
    gen_sim1,
    gen_sim2,
    gen_sim3,
    icc_to_tau2,
    mc_se,
    parse_scenario_file,
    reports_to_csv,
    round_half_up,
    run_scenario,
    sim3_scale,
    two_stage_analyst,
)


def anova_icc(values, groups):
    """One-way random-effects ANOVA estimator for unbalanced groups."""
    sizes = np.bincount(groups).astype(float)
    m, n = sizes.size, values.size
    means = np.bincount(groups, weights=values) / sizes
    grand = values.mean()
    msb = np.sum(sizes * (means - grand) ** 2) / (m - 1)
    msw = np.sum((values - means[groups]) ** 2) / (n - m)
    n0 = (n - np.sum(sizes**2) / n) / (m - 1)
    return (msb - msw) / (msb + (n0 - 1) * msw)


def strip_elapsed(report):
    d = json.loads(report.to_json())
    d.pop("elapsed_seconds")
    return d


class TestHelpers:
    def test_tau2(self):
        assert icc_to_tau2(0.1) == pytest.approx(1 / 9, abs=1e-15)
        with pytest.raises(InvalidScenario):
            icc_to_tau2(1.0)

    def test_round_half_up(self):
        np.testing.assert_array_equal(round_half_up([20.5, 49.49, 50.5, 21.0]), [21, 49, 51, 21])

    def test_mc_se(self):
        assert mc_se(0.05, 2000) == pytest.approx(0.00487, abs=5e-6)
        assert mc_se(0.05, 2000) == pytest.approx(math.sqrt(0.05 * 0.95 / 2000), abs=1e-15)
        with pytest.raises(InvalidParams):
            mc_se(0.5, 0)

    @pytest.mark.parametrize("m,k,icc", [(31, 5, 0.1), (100, 0, 0.1), (100, 10, 0.1), (100, 5, 0.0)])
    def test_invalid_generator_args(self, m, k, icc):
        with pytest.raises(InvalidScenario):
            gen_sim1(m, k, icc, RngStream(0))


class TestSim1:
    def test_structure_over_many_draws(self):
        for rep in range(2000):
            sd = gen_sim1(100, 5, 0.1, RngStream(3, rep))
            assert sd.arm.sum() == 50
            assert sd.sizes.min() >= 20 and sd.sizes.max() <= 80
            assert np.all(sd.stratum == np.repeat([0, 1], 50))
            assert np.all(sd.sizes[sd.stratum == 0] <= 50)
            assert np.all(sd.sizes[sd.stratum == 1] >= 50)
            assert np.all(sd.stratum[sd.sizes > 50] == 1)

    def test_null_delta_mean_zero(self):
        d = np.array([estimand_oracle(gen_sim1(100, 5, 0.1, RngStream(4, r)).potential).delta
                      for r in range(2000)])
        assert abs(d.mean()) < 3 * d.std(ddof=1) / np.sqrt(d.size)

    def test_k9_delta_near_point_six(self):
        d = [estimand_oracle(gen_sim1(100, 9, 0.1, RngStream(5, r)).potential).delta
             for r in range(2000)]
        assert abs(np.mean(d) - 0.6) < 0.02

    def test_icc_anova(self):
        est = []
        for r in range(200):
            sd = gen_sim1(100, 5, 0.1, RngStream(6, r))
            cid = sd.dataset.codes
            resid = sd.potential.y0 - (sd.sizes > 50).astype(float)[cid]
            est.append(anova_icc(resid, cid))
        assert abs(np.mean(est) - 0.1) < 0.01

    def test_consistency(self):
        sd = gen_sim1(20, 7, 0.1, RngStream(7))
        a = sd.dataset.a
        np.testing.assert_array_equal(sd.dataset.y, np.where(a == 1, sd.potential.y1, sd.potential.y0))


class TestSim2:
    def test_zero_coefficient_matches_sim1(self):
        for r in range(20):
            a = gen_sim2(40, 3, 0.1, RngStream(8, r), c_coef=0.0)
            b = gen_sim1(40, 3, 0.1, RngStream(8, r))
            np.testing.assert_array_equal(a.dataset.y, b.dataset.y)
            assert set(a.dataset.covariates) == {"C", "C2"}

    def test_covariate_columns(self):
        ds = gen_sim2(30, 5, 0.1, RngStream(9)).dataset
        c = ds.covariate_means(["C"])[:, 0]
        np.testing.assert_allclose(ds.covariate_means(["C2"])[:, 0], c**2, atol=1e-12)

    def test_cluster_mean_variance_increase(self):
        diffs = []
        for r in range(500):
            a = gen_sim2(100, 5, 0.1, RngStream(10, r)).dataset
            b = gen_sim1(100, 5, 0.1, RngStream(10, r)).dataset
            diffs.append(a.cluster_means(a.y).var(ddof=1) - b.cluster_means(b.y).var(ddof=1))
        assert abs(np.mean(diffs) - 1.0) < 0.1


class TestSim3:
    def test_sizes(self):
        sd = gen_sim3(100, 4, 0.1, RngStream(11))
        assert sd.sizes.min() >= 5 and sd.sizes.max() <= 35 and sd.arm.sum() == 50

    def test_i_ate_zero_on_noise_free_contrasts(self):
        for k in range(1, 10):
            for r in range(20):
                sizes = gen_sim3(100, k, 0.1, RngStream(12, r)).sizes
                tau = expected_contrasts_sim3(sizes, k)
                assert abs(np.sum(sizes * tau) / sizes.sum()) < 1e-10

    def test_k1_no_ics(self):
        sd = gen_sim3(60, 1, 0.1, RngStream(13))
        assert np.all(expected_contrasts_sim3(sd.sizes, 1) == 0)

    def test_c_ate_magnitude_increasing(self):
        # closed form with expected stratum sizes 12.5 and 27.5: c-ATE = 0.05 (k-1)(1 - 27.5/12.5)
        closed = [abs(0.05 * (k - 1) * (1 - 27.5 / 12.5)) for k in range(1, 10)]
        assert np.all(np.diff(closed) > 0)
        sizes = gen_sim3(100, 1, 0.1, RngStream(14)).sizes
        emp = [abs(expected_contrasts_sim3(sizes, k).mean()) for k in range(1, 10)]
        assert np.all(np.diff(emp) > 0)

    def test_scale(self):
        assert sim3_scale([10, 30, 30]) == pytest.approx(6.0)
        assert sim3_scale([10, 30, 30], literal=True) == pytest.approx(2.0)
        sizes = np.array([10, 12, 25, 30])
        tau = expected_contrasts_sim3(sizes, 5, literal_s=True)
        assert abs(tau.mean()) < 1e-12

    def test_estimand_oracle_i_ate_zero_without_noise_in_expectation(self):
        vals = [estimand_oracle(gen_sim3(100, 6, 0.1, RngStream(15, r)).potential).i_ate
                for r in range(500)]
        assert abs(np.mean(vals)) < 3 * np.std(vals, ddof=1) / np.sqrt(500)


class TestTwoStage:
    def test_overwhelming_ics_uses_independence(self):
        used = [two_stage_analyst(gen_sim3(100, 9, 0.1, RngStream(16, r)).dataset).used_independence
                for r in range(200)]
        assert np.mean(used) > 0.95

    def test_equal_sizes_exchangeable(self):
        rng = np.random.default_rng(0)
        g = np.repeat(np.arange(20), 5)
        ds = Dataset(rng.normal(size=100), (np.arange(20) % 2)[g], g, {"C": rng.normal(size=20)[g]})
        res = two_stage_analyst(ds)
        assert not res.used_independence and res.ics_p_value == 1.0


class TestScenario:
    def test_validation(self):
        with pytest.raises(InvalidScenario):
            SimulationScenario("sim4")
        with pytest.raises(InvalidScenario):
            SimulationScenario("sim1", methods=("mat_adj",))
        with pytest.raises(InvalidScenario):
            SimulationScenario("typeI_sweep", k=3)
        with pytest.raises(InvalidScenario):
            SimulationScenario("sim1", methods=("bogus",))
        assert SimulationScenario("sim3").methods == ("analyst1", "analyst2")

    def test_parse_file(self):
        text = "# comment\nscenario = sim2\nM = 40\nk = 3  # inline\nicc=0.01\nmethods = mat, rbt\n"
        fields = parse_scenario_file(text)
        sc = SimulationScenario(**fields)
        assert (sc.scenario_id, sc.M, sc.k, sc.icc, sc.methods) == ("sim2", 40, 3, 0.01, ("mat", "rbt"))
        with pytest.raises(InvalidScenario):
            parse_scenario_file("M: 30")
        with pytest.raises(InvalidScenario):
            parse_scenario_file("colour = red")
        with pytest.raises(InvalidScenario):
            parse_scenario_file("M = many")

    def test_determinism_and_parallel_agreement(self):
        sc = SimulationScenario("sim2", M=30, k=4, n_sims=12, n_perms=50, seed=3,
                                methods=("mat", "rbt_adj"))
        a = run_scenario(sc)
        b = run_scenario(sc)
        c = run_scenario(SimulationScenario(**{**sc.to_dict(), "methods": sc.methods, "threads": 2}))
        assert strip_elapsed(a) == strip_elapsed(b)
        da, dc = strip_elapsed(a), strip_elapsed(c)
        da["scenario"].pop("threads"), dc["scenario"].pop("threads")
        assert da == dc

    def test_report_fields(self):
        sc = SimulationScenario("sim3", M=20, k=5, n_sims=6, seed=2)
        rep = run_scenario(sc)
        for s in rep.methods.values():
            assert 0 <= s.rejection_rate <= 1 and s.n_failed == 0
            assert s.mc_se == pytest.approx(math.sqrt(s.rejection_rate * (1 - s.rejection_rate) / 6))
            assert s.bias_mc_ci[0] <= s.bias <= s.bias_mc_ci[1]
        lines = reports_to_csv([rep]).splitlines()
        assert lines[0].split(",") == CSV_FIELDS and len(lines) == 3

    @pytest.mark.slow
    def test_power_shape(self):
        rates = {}
        for k in (1, 4, 6, 9):
            sc = SimulationScenario("sim1", M=100, k=k, n_sims=200, seed=21,
                                    methods=("mat", "rbt", "mb_threshold"))
            rates[k] = {m: s.rejection_rate for m, s in run_scenario(sc).methods.items()}
        for m in ("mat", "rbt", "mb_threshold"):
            ends, middle = min(rates[1][m], rates[9][m]), max(rates[4][m], rates[6][m])
            # the threshold test is saturated at power 1 for every k at this M
            assert ends > middle or ends == middle == 1.0
