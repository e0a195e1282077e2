"""Policy forward/score/backprop checks against finite differences."""

import math

import numpy as np
import pytest

from cohortsel.policy import (
    PROB_FLOOR,
    LinearPolicy,
    MlpPolicy,
    init_linear_policy,
    init_mlp_policy,
    load_policy,
    policy_from_payload,
    policy_to_payload,
    save_policy,
)
from cohortsel.rng import generator

from _oracles import all_actions, action_probabilities, random_feature_matrix


def log_pi(policy, X, a):
    """log pi(a | X) recomputed from the acceptance probabilities alone."""
    p = policy.accept_prob(X)
    a = np.asarray(a, dtype=float)
    return float(np.sum(a * np.log(p) + (1.0 - a) * np.log1p(-p)))


def fd_grad(f, flat, h):
    g = np.empty_like(flat)
    for j in range(flat.size):
        up = flat.copy()
        up[j] += h
        dn = flat.copy()
        dn[j] -= h
        g[j] = (f(up) - f(dn)) / (2.0 * h)
    return g


def small_mlp(d, seed=0, p_drop=0.1):
    rng = np.random.default_rng(seed)
    h1, h2 = 5, 4
    return MlpPolicy(
        w1=rng.normal(scale=0.6, size=(d + 1, h1)),
        b1=rng.normal(scale=0.1, size=h1),
        w2=rng.normal(scale=0.6, size=(h1, h2)),
        b2=rng.normal(scale=0.1, size=h2),
        w3=rng.normal(scale=0.6, size=h2),
        b3=rng.normal(scale=0.1, size=1),
        p_drop=p_drop,
    )


class TestLinearPolicy:
    def test_zero_init_gives_half(self):
        pol = init_linear_policy(3)
        X = random_feature_matrix(np.random.default_rng(0), 5, 3)
        np.testing.assert_array_equal(pol.accept_prob(X), np.full(5, 0.5))

    def test_matches_sigmoid(self):
        theta = np.array([1.5, -2.0, 0.25])
        pol = LinearPolicy(theta)
        X = random_feature_matrix(np.random.default_rng(1), 6, 2)
        z = X.values @ theta[:2] + theta[2]
        want = 1.0 / (1.0 + np.exp(-z))
        np.testing.assert_allclose(pol.accept_prob(X), want, rtol=1e-12)

    def test_probability_clamp(self):
        pol = LinearPolicy(np.array([0.0, 100.0]))  # bias drives z = 100
        X = random_feature_matrix(np.random.default_rng(2), 4, 1)
        np.testing.assert_array_equal(pol.accept_prob(X), np.full(4, 1.0 - PROB_FLOOR))
        low = LinearPolicy(np.array([0.0, -100.0]))
        np.testing.assert_array_equal(low.accept_prob(X), np.full(4, PROB_FLOOR))

    def test_score_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        X = random_feature_matrix(rng, 5, 3)
        pol = LinearPolicy(rng.normal(scale=0.8, size=4))
        a = rng.integers(0, 2, size=5).astype(float)
        got = pol.log_prob_grad(X, a)
        want = fd_grad(lambda f: log_pi(pol.with_flat(f), X, a), pol.flat(), 1e-6)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_score_identity_sums_to_zero(self):
        # E_{a~pi}[grad log pi(a)] = 0; enumerate all 2^n actions.
        rng = np.random.default_rng(4)
        X = random_feature_matrix(rng, 3, 2)
        pol = LinearPolicy(rng.normal(size=3))
        acts = all_actions(3)
        probs = action_probabilities(pol.accept_prob(X), acts)
        grads = pol.log_prob_grad_many(X, acts)
        np.testing.assert_allclose(probs @ grads, np.zeros(3), atol=1e-12)

    def test_grad_many_stacks_single(self):
        rng = np.random.default_rng(5)
        X = random_feature_matrix(rng, 4, 2)
        pol = LinearPolicy(rng.normal(size=3))
        acts = rng.integers(0, 2, size=(6, 4)).astype(float)
        many = pol.log_prob_grad_many(X, acts)
        for i, a in enumerate(acts):
            np.testing.assert_allclose(many[i], pol.log_prob_grad(X, a), rtol=1e-12)

    def test_prob_backprop_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        X = random_feature_matrix(rng, 5, 3)
        pol = LinearPolicy(rng.normal(scale=0.7, size=4))
        dp = rng.normal(size=5)

        def weighted_prob(flat):
            return float(dp @ pol.with_flat(flat).accept_prob(X))

        got = pol.prob_backprop(X, dp)
        want = fd_grad(weighted_prob, pol.flat(), 1e-6)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_feature_count_mismatch(self):
        pol = init_linear_policy(3)
        X = random_feature_matrix(np.random.default_rng(0), 4, 2)
        with pytest.raises(ValueError):
            pol.accept_prob(X)

    def test_flat_roundtrip(self):
        pol = LinearPolicy(np.array([1.0, -2.0, 3.0]))
        again = pol.with_flat(pol.flat())
        np.testing.assert_array_equal(again.theta, pol.theta)
        with pytest.raises(ValueError):
            pol.with_flat(np.zeros(5))


class TestMlpPolicy:
    def test_score_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        X = random_feature_matrix(rng, 4, 3)
        pol = small_mlp(3, seed=7, p_drop=0.0)
        a = rng.integers(0, 2, size=4).astype(float)
        got = pol.log_prob_grad(X, a)
        want = fd_grad(lambda f: log_pi(pol.with_flat(f), X, a), pol.flat(), 1e-5)
        np.testing.assert_allclose(got, want, rtol=5e-4, atol=1e-8)

    def test_score_identity_sums_to_zero(self):
        rng = np.random.default_rng(8)
        X = random_feature_matrix(rng, 3, 2)
        pol = small_mlp(2, seed=8, p_drop=0.0)
        acts = all_actions(3)
        probs = action_probabilities(pol.accept_prob(X), acts)
        grads = pol.log_prob_grad_many(X, acts)
        np.testing.assert_allclose(probs @ grads, np.zeros(pol.n_params), atol=1e-10)

    def test_prob_backprop_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        X = random_feature_matrix(rng, 4, 3)
        pol = small_mlp(3, seed=9, p_drop=0.0)
        dp = rng.normal(size=4)

        def weighted_prob(flat):
            return float(dp @ pol.with_flat(flat).accept_prob(X))

        got = pol.prob_backprop(X, dp)
        want = fd_grad(weighted_prob, pol.flat(), 1e-5)
        np.testing.assert_allclose(got, want, rtol=5e-4, atol=1e-8)

    def test_flat_roundtrip_preserves_shapes(self):
        pol = small_mlp(3, seed=10)
        flat = pol.flat()
        again = pol.with_flat(flat)
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            np.testing.assert_array_equal(getattr(again, name), getattr(pol, name))
        assert again.p_drop == pol.p_drop
        with pytest.raises(ValueError):
            pol.with_flat(flat[:-1])

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            MlpPolicy(
                w1=np.zeros((4, 5)),
                b1=np.zeros(5),
                w2=np.zeros((5, 4)),
                b2=np.zeros(4),
                w3=np.zeros(3),  # does not chain with h2 = 4
                b3=np.zeros(1),
            )
        with pytest.raises(ValueError):
            small_mlp(3, p_drop=1.0)

    def test_feature_count_mismatch(self):
        pol = small_mlp(3)
        X = random_feature_matrix(np.random.default_rng(0), 4, 2)
        with pytest.raises(ValueError):
            pol.accept_prob(X)


class TestDropout:
    def test_requires_rng_to_activate(self):
        rng = np.random.default_rng(11)
        X = random_feature_matrix(rng, 6, 3)
        pol = small_mlp(3, seed=11, p_drop=0.5)
        a = rng.integers(0, 2, size=6).astype(float)
        plain = pol.log_prob_grad(X, a)
        again = pol.log_prob_grad(X, a)
        np.testing.assert_array_equal(plain, again)  # no rng, no noise
        dropped = pol.log_prob_grad(X, a, dropout_rng=generator(0, "drop"))
        assert not np.allclose(dropped, plain)

    def test_mask_draw_is_reproducible(self):
        rng = np.random.default_rng(12)
        X = random_feature_matrix(rng, 6, 3)
        pol = small_mlp(3, seed=12, p_drop=0.3)
        a = rng.integers(0, 2, size=6).astype(float)
        g1 = pol.log_prob_grad(X, a, dropout_rng=generator(5, "drop"))
        g2 = pol.log_prob_grad(X, a, dropout_rng=generator(5, "drop"))
        np.testing.assert_array_equal(g1, g2)

    def test_zero_rate_ignores_rng(self):
        rng = np.random.default_rng(13)
        X = random_feature_matrix(rng, 5, 3)
        pol = small_mlp(3, seed=13, p_drop=0.0)
        a = rng.integers(0, 2, size=5).astype(float)
        with_rng = pol.log_prob_grad(X, a, dropout_rng=generator(1, "drop"))
        without = pol.log_prob_grad(X, a)
        np.testing.assert_array_equal(with_rng, without)

    def test_masks_shared_across_action_rows(self):
        # One gradient pass means one mask draw: identical action rows must
        # produce identical gradient rows.
        rng = np.random.default_rng(14)
        X = random_feature_matrix(rng, 5, 3)
        pol = small_mlp(3, seed=14, p_drop=0.4)
        a = rng.integers(0, 2, size=5).astype(float)
        grads = pol.log_prob_grad_many(X, np.stack([a, a]), dropout_rng=generator(2, "drop"))
        np.testing.assert_array_equal(grads[0], grads[1])


class TestSampling:
    def test_shapes_and_values(self):
        rng = np.random.default_rng(15)
        X = random_feature_matrix(rng, 7, 2)
        pol = LinearPolicy(rng.normal(size=3))
        single = pol.sample_actions(X, generator(0, "act"))
        batch = pol.sample_actions(X, generator(0, "act"), size=5)
        assert single.shape == (7,)
        assert batch.shape == (5, 7)
        assert set(np.unique(batch)) <= {0.0, 1.0}

    def test_acceptance_frequency_tracks_probability(self):
        rng = np.random.default_rng(16)
        X = random_feature_matrix(rng, 6, 2)
        pol = LinearPolicy(rng.normal(size=3))
        p = pol.accept_prob(X)
        draws = pol.sample_actions(X, generator(3, "act"), size=20000)
        freq = draws.mean(axis=0)
        se = np.sqrt(p * (1 - p) / 20000)
        assert np.all(np.abs(freq - p) < 4 * se + 1e-12)


class TestInitializers:
    def test_linear_init(self):
        pol = init_linear_policy(4)
        np.testing.assert_array_equal(pol.theta, np.zeros(5))

    def test_mlp_init_structure(self):
        pol = init_mlp_policy(4, hidden=(32, 16), rng=generator(0, "init"))
        assert pol.hidden == (32, 16)
        assert pol.w1.shape == (5, 32)
        np.testing.assert_array_equal(pol.b1, np.zeros(32))
        np.testing.assert_array_equal(pol.b2, np.zeros(16))
        np.testing.assert_array_equal(pol.b3, np.zeros(1))

    def test_mlp_init_deterministic_and_centered(self):
        a = init_mlp_policy(3, hidden=(8, 4), rng=generator(1, "init"))
        b = init_mlp_policy(3, hidden=(8, 4), rng=generator(1, "init"))
        np.testing.assert_array_equal(a.flat(), b.flat())
        X = random_feature_matrix(np.random.default_rng(0), 50, 3)
        p = a.accept_prob(X)
        # small output-layer init keeps the fresh policy near indifference
        assert np.all(np.abs(p - 0.5) < 0.25)


class TestSerialization:
    def test_linear_roundtrip(self, tmp_path):
        pol = LinearPolicy(np.array([0.3, -1.2, 0.8]))
        payload = policy_to_payload(pol)
        again = policy_from_payload(payload)
        assert isinstance(again, LinearPolicy)
        np.testing.assert_array_equal(again.theta, pol.theta)
        path = tmp_path / "pol.json"
        save_policy(pol, str(path))
        np.testing.assert_array_equal(load_policy(str(path)).theta, pol.theta)

    def test_mlp_roundtrip(self, tmp_path):
        pol = small_mlp(3, seed=17, p_drop=0.2)
        path = tmp_path / "mlp.json"
        save_policy(pol, str(path))
        again = load_policy(str(path))
        assert isinstance(again, MlpPolicy)
        np.testing.assert_array_equal(again.flat(), pol.flat())
        assert again.p_drop == pol.p_drop

    def test_rejects_unknown_payloads(self):
        pol = init_linear_policy(2)
        payload = policy_to_payload(pol)
        bad_version = dict(payload, format_version=99)
        with pytest.raises(ValueError):
            policy_from_payload(bad_version)
        bad_kind = dict(payload, kind="tree")
        with pytest.raises(ValueError):
            policy_from_payload(bad_kind)
