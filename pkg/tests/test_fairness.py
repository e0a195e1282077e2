"""Fairness penalties and EMC estimators against exact enumeration."""

import numpy as np
import pytest

from cohortsel.baselines import FixedMarginalPolicy
from cohortsel.core import FeatureMatrix, UtilityConfig
from cohortsel.fairness import (
    FairnessConfig,
    combine_penalties,
    demographic_parity_penalty,
    emc,
    emc_batch,
    equality_of_opportunity_penalty,
    evaluate_fairness,
    penalty_prob_gradient,
)
from cohortsel.rng import generator

from _oracles import const_outcomes, exact_emc, point_pool, random_feature_matrix


def pool_with_groups(groups, d=2, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0, 1, size=(len(groups), d))
    return FeatureMatrix(values, np.asarray(groups))


class TestDemographicParity:
    def test_gap_arithmetic(self):
        p = np.array([0.8, 0.8, 0.2, 0.2])
        groups = np.array(["a", "a", "b", "b"])
        assert demographic_parity_penalty(p, groups) == pytest.approx(0.6)
        assert demographic_parity_penalty(p, groups, epsilon=0.25) == pytest.approx(0.35)
        assert demographic_parity_penalty(p, groups, epsilon=0.7) == 0.0

    def test_max_over_pairs(self):
        p = np.array([0.9, 0.5, 0.1])
        groups = np.array(["a", "b", "c"])
        # widest pair is (a, c)
        assert demographic_parity_penalty(p, groups) == pytest.approx(0.8)

    def test_single_group_warns_and_zeroes(self):
        p = np.array([0.9, 0.1])
        with pytest.warns(UserWarning, match="fewer than two groups"):
            got = demographic_parity_penalty(p, np.array(["a", "a"]))
        assert got == 0.0

    def test_equal_rates_no_penalty(self):
        p = np.array([0.3, 0.7, 0.3, 0.7])
        groups = np.array(["a", "a", "b", "b"])
        assert demographic_parity_penalty(p, groups) == 0.0


class TestEmcBatch:
    def test_matches_enumeration(self):
        # Deterministic outcomes and a fixed pool: Monte Carlo noise comes
        # only from co-candidate actions, and the exact value enumerates
        # the other candidates' selections.
        rng = np.random.default_rng(0)
        n = 6
        X = random_feature_matrix(rng, n, 2)
        y = rng.uniform(0.05, 1.0, size=(n, 3))
        cfg = UtilityConfig(c=0.1)
        p = rng.uniform(0.2, 0.8, size=n)
        policy = FixedMarginalPolicy(p)
        got = emc_batch(
            X, policy, const_outcomes(y), cfg, n_a=4000, n_y=1, rng=generator(0, "emc")
        )
        exact = np.array([exact_emc(p, i, y, cfg.c, cfg.epsilon_log) for i in range(n)])
        se = 3.0 / np.sqrt(4000)  # crude bound; per-draw gains are O(1) here
        np.testing.assert_allclose(got, exact, atol=3 * se)

    def test_own_action_does_not_bias(self):
        # The paired difference overrides candidate i's own draw, so the
        # estimate is invariant to i's acceptance probability.
        rng = np.random.default_rng(1)
        n = 5
        X = random_feature_matrix(rng, n, 2)
        y = rng.uniform(0.1, 1.0, size=(n, 3))
        cfg = UtilityConfig(c=0.05)
        base = np.full(n, 0.5)
        lo = base.copy()
        lo[2] = 0.01
        hi = base.copy()
        hi[2] = 0.99
        exact_lo = exact_emc(lo, 2, y, cfg.c, cfg.epsilon_log)
        exact_hi = exact_emc(hi, 2, y, cfg.c, cfg.epsilon_log)
        assert exact_lo == pytest.approx(exact_hi, rel=1e-12)

    def test_cost_shifts_emc_linearly(self):
        rng = np.random.default_rng(2)
        X = random_feature_matrix(rng, 4, 2)
        y = rng.uniform(0.1, 1.0, size=(4, 3))
        policy = FixedMarginalPolicy(np.full(4, 0.5))
        args = dict(n_a=64, n_y=1)
        a = emc_batch(X, policy, const_outcomes(y), UtilityConfig(c=0.0), rng=generator(3, "e"), **args)
        b = emc_batch(X, policy, const_outcomes(y), UtilityConfig(c=0.4), rng=generator(3, "e"), **args)
        np.testing.assert_allclose(a - b, np.full(4, 0.4), atol=1e-12)

    def test_deterministic_given_stream(self):
        rng = np.random.default_rng(3)
        X = random_feature_matrix(rng, 4, 2)
        y = rng.uniform(0.1, 1.0, size=(4, 3))
        policy = FixedMarginalPolicy(np.full(4, 0.6))
        a = emc_batch(X, policy, const_outcomes(y), UtilityConfig(), n_a=16, n_y=2, rng=generator(4, "e"))
        b = emc_batch(X, policy, const_outcomes(y), UtilityConfig(), n_a=16, n_y=2, rng=generator(4, "e"))
        np.testing.assert_array_equal(a, b)


class TestEmcSingle:
    def test_matches_enumeration(self):
        rng = np.random.default_rng(4)
        n_co = 4
        X_co = random_feature_matrix(rng, n_co, 2)
        y = rng.uniform(0.05, 1.0, size=(n_co + 1, 3))
        cfg = UtilityConfig(c=0.1)
        p_full = rng.uniform(0.2, 0.8, size=n_co + 1)
        policy = FixedMarginalPolicy(p_full)
        x_new = rng.uniform(0, 1, size=2)

        got, se = emc(
            x_new, "g0", policy, point_pool(X_co), const_outcomes(y), cfg,
            n_x=50, n_a=200, n_y=1, rng=generator(5, "emc"), return_stderr=True,
        )
        exact = exact_emc(p_full, n_co, y, cfg.c, cfg.epsilon_log)
        assert se > 0
        assert abs(got - exact) < 4 * se

    def test_appends_candidate_last(self):
        # A candidate whose outcome row is huge must dominate the EMC sign.
        rng = np.random.default_rng(5)
        X_co = random_feature_matrix(rng, 3, 2)
        y = np.vstack([np.full((3, 3), 0.01), np.full((1, 3), 1.0)])
        policy = FixedMarginalPolicy(np.full(4, 0.3))
        cfg = UtilityConfig(c=0.05)
        val = emc(
            np.zeros(2), "g0", policy, point_pool(X_co), const_outcomes(y), cfg,
            n_x=8, n_a=64, n_y=1, rng=generator(6, "emc"),
        )
        assert val > 1.0

    def test_sample_count_validation(self):
        policy = FixedMarginalPolicy(np.array([0.5]))
        with pytest.raises(ValueError):
            emc(
                np.zeros(2), "g", policy,
                point_pool(random_feature_matrix(np.random.default_rng(0), 1, 2)),
                const_outcomes(np.ones((2, 3))), UtilityConfig(),
                n_x=0, n_a=1, n_y=1, rng=generator(0, "x"),
            )


class TestEqualityOfOpportunity:
    def test_restricted_to_qualified(self):
        p = np.array([0.9, 0.1, 0.8, 0.2])
        groups = np.array(["a", "a", "b", "b"])
        emc_values = np.array([1.0, -1.0, 1.0, -1.0])
        # qualified rows are 0 and 2: gap |0.9 - 0.8|
        got = equality_of_opportunity_penalty(p, groups, emc_values, tau=0.0)
        assert got == pytest.approx(0.1)

    def test_no_qualified_group_warns(self):
        p = np.array([0.9, 0.1])
        groups = np.array(["a", "b"])
        emc_values = np.array([1.0, -1.0])
        with pytest.warns(UserWarning, match="qualified"):
            got = equality_of_opportunity_penalty(p, groups, emc_values, tau=0.0)
        assert got == 0.0

    def test_tau_boundary_is_inclusive(self):
        p = np.array([0.9, 0.2])
        groups = np.array(["a", "b"])
        emc_values = np.array([0.3, 0.3])
        got = equality_of_opportunity_penalty(p, groups, emc_values, tau=0.3)
        assert got == pytest.approx(0.7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            equality_of_opportunity_penalty(
                np.array([0.5, 0.5]), np.array(["a", "b"]), np.array([0.1]), tau=0.0
            )


class TestCombine:
    def test_weighted_sum(self):
        fcfg = FairnessConfig(lambda_dem=2.0, lambda_eq=0.5)
        assert combine_penalties(0.3, 0.4, fcfg) == pytest.approx(0.8)

    def test_max(self):
        fcfg = FairnessConfig(lambda_dem=1.0, lambda_eq=1.0, combine_mode="max")
        assert combine_penalties(0.3, 0.4, fcfg) == pytest.approx(0.4)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FairnessConfig(epsilon=-0.1)
        with pytest.raises(ValueError):
            FairnessConfig(combine_mode="geometric")
        with pytest.raises(ValueError):
            FairnessConfig(lambda_dem=-1.0)
        with pytest.raises(ValueError):
            FairnessConfig(emc_n_a=0)

    def test_tau_defaults_to_cost(self):
        assert FairnessConfig().resolve_tau(UtilityConfig(c=0.25)) == 0.25
        assert FairnessConfig(tau=0.1).resolve_tau(UtilityConfig(c=0.25)) == 0.1


class TestPenaltyGradient:
    def test_active_pair_subgradient(self):
        p = np.array([0.9, 0.7, 0.2, 0.4])
        groups = np.array(["a", "a", "b", "b"])
        emc_values = np.full(4, 1.0)  # everyone qualified
        ucfg = UtilityConfig(c=0.1)
        fcfg = FairnessConfig(epsilon=0.0, lambda_dem=1.0, lambda_eq=0.0)
        grad, p_dem, p_eq, p_all = penalty_prob_gradient(p, groups, emc_values, ucfg, fcfg)
        assert p_dem == pytest.approx(0.5)
        np.testing.assert_allclose(grad, [0.5, 0.5, -0.5, -0.5])

    def test_inactive_hinge_zero_gradient(self):
        p = np.array([0.52, 0.48])
        groups = np.array(["a", "b"])
        grad, p_dem, p_eq, p_all = penalty_prob_gradient(
            p, groups, np.zeros(2), UtilityConfig(c=0.0), FairnessConfig(epsilon=0.1)
        )
        assert p_all == 0.0
        np.testing.assert_array_equal(grad, np.zeros(2))

    def test_matches_finite_differences_when_smooth(self):
        # Away from ties and the hinge, the subgradient is the gradient.
        rng = np.random.default_rng(6)
        p = np.array([0.9, 0.8, 0.3, 0.2, 0.6, 0.5])
        groups = np.array(["a", "a", "b", "b", "c", "c"])
        emc_values = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
        ucfg = UtilityConfig(c=0.0)
        fcfg = FairnessConfig(epsilon=0.01, lambda_dem=0.7, lambda_eq=1.3)
        grad, _, _, base = penalty_prob_gradient(p, groups, emc_values, ucfg, fcfg)
        h = 1e-6
        for i in range(p.size):
            up = p.copy()
            up[i] += h
            dn = p.copy()
            dn[i] -= h

            def total(q):
                dem = demographic_parity_penalty(q, groups, fcfg.epsilon)
                eq = equality_of_opportunity_penalty(
                    q, groups, emc_values, fcfg.resolve_tau(ucfg), fcfg.epsilon
                )
                return combine_penalties(dem, eq, fcfg)

            fd = (total(up) - total(dn)) / (2 * h)
            assert grad[i] == pytest.approx(fd, abs=1e-6)

    def test_max_mode_follows_active_branch(self):
        p = np.array([0.9, 0.1, 0.9, 0.1])
        groups = np.array(["a", "b", "a", "b"])
        # only rows 0 and 1 qualified; dem uses all rows
        emc_values = np.array([1.0, 1.0, -1.0, -1.0])
        ucfg = UtilityConfig(c=0.0)
        dem_heavy = FairnessConfig(epsilon=0.0, combine_mode="max", lambda_dem=2.0, lambda_eq=1.0)
        grad, p_dem, p_eq, p_all = penalty_prob_gradient(p, groups, emc_values, ucfg, dem_heavy)
        assert p_all == pytest.approx(2.0 * p_dem)
        # gradient spread across both "a" rows: the dem branch is active
        assert grad[2] != 0.0
        eq_heavy = FairnessConfig(epsilon=0.0, combine_mode="max", lambda_dem=1.0, lambda_eq=2.0)
        grad2, _, _, _ = penalty_prob_gradient(p, groups, emc_values, ucfg, eq_heavy)
        assert grad2[2] == 0.0  # eq branch ignores unqualified rows


class TestEvaluateFairness:
    def test_report_fields(self):
        rng = np.random.default_rng(7)
        X = pool_with_groups(["a", "a", "b", "b", "b"], seed=7)
        y = rng.uniform(0.1, 1.0, size=(5, 3))
        policy = FixedMarginalPolicy(np.array([0.9, 0.8, 0.3, 0.2, 0.4]))
        report = evaluate_fairness(
            policy, X, const_outcomes(y), UtilityConfig(c=0.05),
            FairnessConfig(epsilon=0.0), generator(8, "fair"), keep_emc=True,
        )
        assert set(report.group_rates) == {"a", "b"}
        assert report.group_rates["a"] == pytest.approx(0.85)
        assert report.group_rates["b"] == pytest.approx(0.3)
        assert report.p_dem == pytest.approx(0.55)
        assert report.p_overall >= report.p_dem
        assert 0 <= report.n_qualified <= 5
        assert report.emc_values.shape == (5,)

    def test_emc_omitted_by_default(self):
        rng = np.random.default_rng(8)
        X = pool_with_groups(["a", "b"], seed=8)
        y = rng.uniform(0.1, 1.0, size=(2, 3))
        policy = FixedMarginalPolicy(np.array([0.5, 0.5]))
        report = evaluate_fairness(
            policy, X, const_outcomes(y), UtilityConfig(),
            FairnessConfig(), generator(9, "fair"),
        )
        assert report.emc_values is None

    def test_single_group_pool_is_silent_and_zero(self):
        rng = np.random.default_rng(9)
        X = pool_with_groups(["a", "a", "a"], seed=9)
        y = rng.uniform(0.1, 1.0, size=(3, 3))
        policy = FixedMarginalPolicy(np.array([0.9, 0.5, 0.1]))
        import warnings as warnings_mod

        with warnings_mod.catch_warnings():
            warnings_mod.simplefilter("error")
            report = evaluate_fairness(
                policy, X, const_outcomes(y), UtilityConfig(),
                FairnessConfig(), generator(10, "fair"),
            )
        assert report.p_dem == 0.0
        assert report.p_eq == 0.0
