import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterics.data import (
    Dataset,
    PotentialOutcomeTable,
    compute_weights,
    estimand_oracle,
    summarize,
)
from clusterics.errors import DimensionMismatch, EmptyInput, InvalidTreatment, SchemaViolation


def exact_estimands(sizes, contrasts):
    """i-ATE, c-ATE and their difference by rational arithmetic from cluster contrasts."""
    sizes = [Fraction(int(s)) for s in sizes]
    tau = [Fraction(t) for t in contrasts]
    total = sum(sizes)
    i_ate = sum(n * t for n, t in zip(sizes, tau)) / total
    c_ate = sum(tau) / len(tau)
    return i_ate, c_ate, i_ate - c_ate


class TestWeights:
    def test_equal_sizes_exact_zero(self):
        w = compute_weights([10, 10, 10])
        assert np.all(w == 0.0)

    def test_hand_example(self):
        w = compute_weights([20, 30, 50])
        np.testing.assert_allclose(w, [-2 / 15, -1 / 30, 1 / 6], atol=1e-15)

    @given(st.lists(st.integers(1, 500), min_size=2, max_size=60))
    def test_sum_zero_and_formula(self, sizes):
        w = compute_weights(sizes)
        assert abs(w.sum()) < 1e-12
        tot = sum(sizes)
        exact = [Fraction(n, tot) - Fraction(1, len(sizes)) for n in sizes]
        np.testing.assert_allclose(w, [float(e) for e in exact], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("bad", [[5], [], [3, 0], [2, 2.5]])
    def test_rejects(self, bad):
        with pytest.raises(EmptyInput):
            compute_weights(bad)


class TestDataset:
    def test_within_cluster_treatment_variation(self):
        with pytest.raises(InvalidTreatment):
            Dataset([1, 2, 3], [0, 1, 1], [1, 1, 2])

    def test_non_binary_treatment(self):
        with pytest.raises(InvalidTreatment):
            Dataset([1, 2, 3], [0, 2, 2], [1, 2, 2])

    def test_one_arm_only(self):
        with pytest.raises(InvalidTreatment):
            Dataset([1, 2, 3], [1, 1, 1], [1, 2, 3])

    def test_single_cluster(self):
        with pytest.raises(EmptyInput):
            Dataset([1, 2], [0, 0], [1, 1])

    def test_missing_outcome(self):
        with pytest.raises(SchemaViolation):
            Dataset([1, np.nan, 3], [0, 1, 1], [1, 2, 2])

    def test_missing_covariate(self):
        with pytest.raises(SchemaViolation):
            Dataset([1, 2, 3], [0, 1, 1], [1, 2, 2], {"x": [1, np.nan, 2]})

    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Dataset([1, 2, 3], [0, 1], [1, 2, 2])

    def test_with_arm(self):
        ds = Dataset([1, 3, 5, 7], [0, 0, 1, 1], ["a", "a", "b", "c"])
        ds2 = ds.with_arm([1, 0, 0])
        np.testing.assert_array_equal(ds2.a, [1, 1, 0, 0])
        np.testing.assert_array_equal(ds2.sizes, ds.sizes)


class TestSummarize:
    def test_hand_example(self):
        ds = Dataset([1, 3, 5], [0, 0, 1], [1, 1, 2])
        s = summarize(ds)
        assert [c.n_i for c in s] == [2, 1]
        assert [c.a_i for c in s] == [0, 1]
        np.testing.assert_allclose([c.y_bar for c in s], [2, 5], atol=1e-15)
        np.testing.assert_allclose([c.pi_i for c in s], [1 / 6, -1 / 6], atol=1e-15)
        np.testing.assert_allclose([c.y_tilde for c in s], [2 / 3, -5 / 3], atol=1e-14)

    def test_singletons(self):
        y = [0.3, -1.2, 4.0, 2.5]
        s = summarize(Dataset(y, [0, 1, 0, 1], [1, 2, 3, 4]))
        assert [c.y_bar for c in s] == y

    def test_covariate_means_with_note(self, caplog):
        ds = Dataset([1, 2, 3, 4], [0, 0, 1, 1], [1, 1, 2, 2], {"x": [1, 3, 5, 5]})
        with caplog.at_level(logging.INFO, logger="clusterics.data"):
            s = summarize(ds)
        assert [c.cov_means["x"] for c in s] == [2.0, 5.0]
        assert "varies within clusters" in caplog.text

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_row_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m = 6
        sizes = rng.integers(1, 5, m)
        cid = np.repeat(np.arange(m), sizes)
        arm = np.array([0, 1] * 3)
        y = rng.normal(size=cid.size)
        x = rng.normal(size=cid.size)
        ds = Dataset(y, arm[cid], cid, {"x": x})
        perm = rng.permutation(cid.size)
        ds2 = Dataset(y[perm], arm[cid][perm], cid[perm], {"x": x[perm]})
        for a, b in zip(summarize(ds), summarize(ds2)):
            assert a.cluster_id == b.cluster_id and a.n_i == b.n_i and a.a_i == b.a_i
            assert a.y_bar == pytest.approx(b.y_bar, abs=1e-12)
            assert a.y_tilde == pytest.approx(b.y_tilde, abs=1e-12)
            assert a.cov_means["x"] == pytest.approx(b.cov_means["x"], abs=1e-12)

    @given(st.lists(st.tuples(st.integers(1, 6), st.floats(-10, 10)), min_size=2, max_size=15))
    def test_weighted_mean_identity(self, clusters):
        sizes = [c[0] for c in clusters]
        cid = np.repeat(np.arange(len(sizes)), sizes)
        y = np.concatenate([np.full(n, v) for n, v in clusters])
        arm = np.arange(len(sizes)) % 2
        s = summarize(Dataset(y, arm[cid], cid))
        lhs = np.mean([c.y_tilde for c in s])
        rhs = sum(c.pi_i * c.y_bar for c in s)
        assert abs(lhs - rhs) < 1e-12


class TestEstimands:
    def test_hand_example(self):
        pot = PotentialOutcomeTable([0, 0, 0, 0], [1, 2, 2, 2], [1, 2, 2, 2])
        e = estimand_oracle(pot)
        assert e.i_ate == pytest.approx(1.75, abs=1e-15)
        assert e.c_ate == pytest.approx(1.5, abs=1e-15)
        assert e.delta == pytest.approx(0.25, abs=1e-15)
        assert e.delta_weighted == pytest.approx(0.25, abs=1e-15)

    def test_equal_sizes_zero(self):
        rng = np.random.default_rng(0)
        cid = np.repeat(np.arange(5), 4)
        e = estimand_oracle(PotentialOutcomeTable(rng.normal(size=20), rng.normal(size=20), cid))
        assert abs(e.delta) < 1e-14

    def test_constant_contrast_zero(self):
        rng = np.random.default_rng(1)
        cid = np.repeat(np.arange(5), [1, 3, 7, 2, 9])
        y0 = rng.normal(size=cid.size)
        e = estimand_oracle(PotentialOutcomeTable(y0, y0 + 0.7, cid))
        assert abs(e.delta) < 1e-14

    def test_triple_identity_random_tables(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(10_000):
            m = int(rng.integers(2, 12))
            sizes = rng.integers(1, 8, m)
            cid = np.repeat(np.arange(m), sizes)
            y0 = rng.normal(size=cid.size)
            y1 = rng.normal(size=cid.size) * 3
            e = estimand_oracle(PotentialOutcomeTable(y0, y1, cid), check=False)
            worst = max(worst, abs(e.delta - e.delta_weighted), abs(e.delta - e.delta_cov))
        assert worst < 1e-10

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(st.integers(1, 9), st.fractions(-5, 5, max_denominator=8)),
            min_size=2,
            max_size=10,
        )
    )
    def test_matches_rational_oracle(self, clusters):
        sizes = [c[0] for c in clusters]
        tau = [c[1] for c in clusters]
        cid = np.repeat(np.arange(len(sizes)), sizes)
        y1 = np.concatenate([np.full(n, float(t)) for n, t in clusters])
        e = estimand_oracle(PotentialOutcomeTable(np.zeros(cid.size), y1, cid))
        i_ate, c_ate, delta = exact_estimands(sizes, tau)
        assert e.i_ate == pytest.approx(float(i_ate), abs=1e-12)
        assert e.c_ate == pytest.approx(float(c_ate), abs=1e-12)
        assert e.delta == pytest.approx(float(delta), abs=1e-12)

    def test_realize(self):
        pot = PotentialOutcomeTable([0, 1, 2, 3], [10, 11, 12, 13], [5, 5, 6, 7])
        ds = pot.realize([1, 0, 1])
        np.testing.assert_array_equal(ds.y, [10, 11, 2, 13])
        np.testing.assert_array_equal(ds.arm, [1, 0, 1])
