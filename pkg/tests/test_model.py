import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from bridge_mixed.data import make_dataset
from bridge_mixed.distributions import bridge_sd
from bridge_mixed.model import (FAMILIES, FIXED, MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL,
                                TWO_LEVEL_BRIDGE, Layout, ModelError, ModelSpec, ParameterState,
                                constrained_matrix, cumulative_probs, dataset_loglik,
                                from_unconstrained, pointwise_loglik, record_loglik,
                                to_unconstrained)

ordered = st.lists(st.floats(-8, 8), min_size=1, max_size=5, unique=True).map(sorted).filter(
    lambda a: np.all(np.diff(a) > 1e-3))


class TestCumulativeProbs:
    def test_published_thresholds(self):
        p = cumulative_probs([-1.871, 0.520], 0.0, 0.0)
        np.testing.assert_allclose(np.cumsum(p)[:2], expit([-1.871, 0.520]), rtol=1e-15)
        # direct evaluation gives (0.133426, 0.493722, 0.372852); the quoted
        # four-decimal figures differ from it by at most 1.2e-4
        np.testing.assert_allclose(p, [expit(-1.871), expit(0.520) - expit(-1.871),
                                       1 - expit(0.520)], rtol=1e-14)
        np.testing.assert_allclose(p, [0.1335, 0.4936, 0.3729], atol=1.5e-4)

    def test_large_effect_moves_mass_up(self):
        p = cumulative_probs([-1.0, 1.0], 0.0, 60.0)
        assert p[-1] == pytest.approx(1.0, abs=1e-20)

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = np.sort(rng.normal(0, 3, rng.integers(1, 6)))
            p = cumulative_probs(a, rng.normal(0, 5), rng.normal(0, 5))
            assert abs(p.sum() - 1.0) < 1e-15
            assert np.all(p >= 0)

    def test_unordered_thresholds(self):
        with pytest.raises(ModelError):
            cumulative_probs([1.0, 0.0], 0.0)

    @settings(max_examples=80, deadline=None)
    @given(ordered, st.floats(-10, 10), st.floats(-10, 10))
    def test_monotone_cumulative(self, alpha, eta, b):
        cum = np.cumsum(cumulative_probs(alpha, eta, b))
        assert np.all(np.diff(cum) >= 0)

    @settings(max_examples=80, deadline=None)
    @given(ordered, st.floats(-10, 10), st.floats(-10, 10), st.floats(-5, 5))
    def test_shift_equivariance(self, alpha, eta, b, c):
        a = np.asarray(alpha)
        np.testing.assert_allclose(cumulative_probs(a, eta, b), cumulative_probs(a + c, eta + c, b),
                                   atol=1e-12)


def toy_records():
    frame = pd.DataFrame({
        "family_id": ["A", "A", "A", "B", "B"],
        "individual_id": ["a1", "a1", "a2", "b1", "b1"],
        "wave": [1, 2, 1, 1, 2],
        "outcome": [1, 3, 2, 2, 3],
        "x": [0.5, -1.0, 2.0, 0.0, 1.5],
    })
    return make_dataset(frame, categories=3)


def params_for(family, ds):
    scale = {MODIFIED_BRIDGE_BRIDGE: {"phi_u": 0.8, "phi_v": 0.6},
             NORMAL_NORMAL: {"sigma_u": 1.2, "sigma_v": 0.7},
             TWO_LEVEL_BRIDGE: {"phi_v": 0.6}, FIXED: {}}[family]
    return ParameterState([-0.7, 0.9], [0.4], scale, [0.3, -0.5], [0.2, -0.1, 0.4],
                          ds.family_keys, ds.individual_keys)


def hand_loglik(family):
    # outcomes, shifts and thresholds written out record by record
    a1, a2, beta = -0.7, 0.9, 0.4
    u = {"A": 0.3, "B": -0.5}
    v = {"a1": 0.2, "a2": -0.1, "b1": 0.4}
    e = 0.6 if family == MODIFIED_BRIDGE_BRIDGE else 1.0
    recs = [("A", "a1", 1, 0.5), ("A", "a1", 3, -1.0), ("A", "a2", 2, 2.0), ("B", "b1", 2, 0.0),
            ("B", "b1", 3, 1.5)]
    total = 0.0
    for f, i, y, x in recs:
        b = 0.0
        if family != FIXED:
            b += v[i]
        if family in (MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL):
            b += u[f] / e
        s = beta * x + b
        p1 = 1 / (1 + math.exp(-(a1 - s)))
        p12 = 1 / (1 + math.exp(-(a2 - s)))
        total += math.log([p1, p12 - p1, 1 - p12][y - 1])
    return total


class TestLikelihood:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_five_record_hand_value(self, family):
        ds = toy_records()
        X = ds.frame[["x"]].to_numpy()
        got = dataset_loglik(ds, X, params_for(family, ds), family)
        assert got == pytest.approx(hand_loglik(family), abs=1e-12)

    def test_binary_reduces_to_logistic(self):
        frame = pd.DataFrame({"family_id": ["f"] * 4, "individual_id": ["i", "i", "j", "j"],
                              "wave": [1, 2, 1, 2], "outcome": [1, 2, 2, 1],
                              "x": [0.3, -0.2, 1.0, 2.0]})
        ds = make_dataset(frame, categories=2)
        par = ParameterState([0.25], [0.7], {}, [], [], (), ())
        ll = pointwise_loglik(ds, frame[["x"]].to_numpy(), par, FIXED)
        eta = 0.25 - 0.7 * frame["x"].to_numpy()
        y0 = frame["outcome"].to_numpy() == 1
        expect = np.where(y0, np.log(expit(eta)), np.log(expit(-eta)))
        np.testing.assert_allclose(ll, expect, rtol=1e-14)

    def test_record_matches_probability_difference(self):
        ds = toy_records()
        X = ds.frame[["x"]].to_numpy()
        par = params_for(MODIFIED_BRIDGE_BRIDGE, ds)
        for row in range(ds.n_records):
            rec = ds.record(row)
            b = par.v[ds.individual_codes[row]] + par.u_star[ds.family_codes[row]] / 0.6
            p = cumulative_probs(par.alpha, X[row, 0] * par.beta[0], b)
            assert record_loglik(rec, X[row], par, MODIFIED_BRIDGE_BRIDGE) == pytest.approx(
                math.log(p[rec.outcome - 1]), rel=1e-12)

    def test_record_unknown_key(self):
        ds = toy_records()
        par = params_for(TWO_LEVEL_BRIDGE, ds)
        rec = ds.record(0)
        bad = type(rec)(rec.family_id, "zz", rec.wave, rec.outcome, rec.covariates)
        with pytest.raises(ModelError):
            record_loglik(bad, [0.5], par, TWO_LEVEL_BRIDGE)

    def test_empty_dataset(self):
        ds = toy_records().subset(np.zeros(5, dtype=bool))
        par = ParameterState([-0.7, 0.9], [0.4])
        assert dataset_loglik(ds, np.zeros((0, 1)), par, FIXED) == 0.0

    def test_sum_of_records_and_permutation(self):
        ds = toy_records()
        X = ds.frame[["x"]].to_numpy()
        par = params_for(NORMAL_NORMAL, ds)
        total = dataset_loglik(ds, X, par, NORMAL_NORMAL)
        per = [record_loglik(ds.record(r), X[r], par, NORMAL_NORMAL) for r in range(5)]
        assert total == pytest.approx(sum(per), abs=1e-13)
        perm = [3, 0, 4, 2, 1]
        ds2 = make_dataset(ds.frame.iloc[perm].reset_index(drop=True), categories=3)
        assert dataset_loglik(ds2, X[perm], par, NORMAL_NORMAL) == pytest.approx(total, abs=1e-13)

    def test_fixed_ignores_random_effects(self):
        ds = toy_records()
        X = ds.frame[["x"]].to_numpy()
        a = ParameterState([-0.7, 0.9], [0.4], {}, [0.0, 0.0], [0.0, 0.0, 0.0])
        b = ParameterState([-0.7, 0.9], [0.4], {}, [5.0, -3.0], [9.0, 1.0, -4.0])
        assert dataset_loglik(ds, X, a, FIXED) == dataset_loglik(ds, X, b, FIXED)


class TestParameterState:
    def test_rejects_unordered(self):
        with pytest.raises(ModelError):
            ParameterState([1.0, 0.5], [0.0])

    def test_rejects_bad_scale(self):
        with pytest.raises(ModelError):
            ParameterState([0.0, 1.0], [0.0], {"phi_v": 1.2})
        with pytest.raises(ModelError):
            ParameterState([0.0, 1.0], [0.0], {"sigma_v": -1.0})

    def test_spec_validation(self):
        with pytest.raises(ModelError):
            ModelSpec("logit_normal")
        with pytest.raises(ModelError):
            ModelSpec(FIXED, categories=1)
        with pytest.raises(ModelError):
            ModelSpec(FIXED, proportional_odds=False)


class TestTransforms:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_round_trip(self, family):
        rng = np.random.default_rng(2)
        spec = ModelSpec(family, categories=4)
        L = Layout(spec, 3, 4, 7)
        for _ in range(50):
            z = rng.normal(0, 1.5, L.dimension)
            par, _ = from_unconstrained(z, L)
            np.testing.assert_allclose(to_unconstrained(par, L), z, atol=1e-12, rtol=0)

    def test_thresholds_always_ordered(self):
        L = Layout(ModelSpec(FIXED, categories=6), 1)
        rng = np.random.default_rng(3)
        for _ in range(200):
            # log-gaps far below log(ulp(alpha)) would round a gap to zero
            par, _ = from_unconstrained(rng.normal(0, 4, L.dimension), L)
            assert np.all(np.diff(par.alpha) > 0)

    def test_log_jacobian_by_finite_differences(self):
        # z -> (alpha1, alpha2, sd_v) for a two-level Bridge model with no coefficients
        L = Layout(ModelSpec(TWO_LEVEL_BRIDGE, categories=3), 0)
        assert L.dimension == 3

        def image(z):
            par, _ = from_unconstrained(z, L)
            return np.array([par.alpha[0], par.alpha[1], bridge_sd(par.scale["phi_v"])])

        rng = np.random.default_rng(4)
        for _ in range(10):
            z = rng.normal(0, 1, 3)
            h = 1e-6
            J = np.column_stack([(image(z + h * e) - image(z - h * e)) / (2 * h) for e in np.eye(3)])
            _, log_jac = from_unconstrained(z, L)
            assert log_jac == pytest.approx(math.log(abs(np.linalg.det(J))), abs=1e-7)

    def test_non_finite_rejected(self):
        L = Layout(ModelSpec(FIXED), 1)
        with pytest.raises(ModelError):
            from_unconstrained(np.array([0.0, np.nan, 1.0]), L)
        with pytest.raises(ModelError):
            to_unconstrained(ParameterState([0.0, np.inf], [1.0]), L)

    def test_layout_names_and_constrained(self):
        L = Layout(ModelSpec(MODIFIED_BRIDGE_BRIDGE), 2, 2, 3, ("x", "g"))
        assert L.names[:6] == ["alpha1", "log_dalpha2", "beta[x]", "beta[g]", "log_sd_u",
                               "log_sd_v"]
        assert L.structural_names == ["alpha1", "alpha2", "beta[x]", "beta[g]", "phi_u", "phi_v"]
        z = np.zeros(L.dimension)
        C = constrained_matrix(z[None, :], L)
        np.testing.assert_allclose(C[0], [0, 1, 0, 0, (1 + 3 / math.pi ** 2) ** -0.5,
                                          (1 + 3 / math.pi ** 2) ** -0.5])
