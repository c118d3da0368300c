import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aes_bandit.graph import IngredientTree, build_element_graph
from aes_bandit.model import (
    CHECKPOINT_HEADER, PosteriorError, PosteriorState, expected_reward, expected_rewards,
)

from conftest import eq2_score


def ridge(X, r, K):
    return np.linalg.solve(np.eye(K) + X.T @ X, X.T @ r)


def binary_design(rng, n, K, p=0.3):
    X = (rng.random((n, K)) < p).astype(float)
    X[:, 0] = 1.0
    return X


class TestExpectedReward:
    def test_zero_weights(self, graph333):
        assert expected_reward(np.zeros(graph333.indexer.dimension), graph333.indexer, (0, 1, 2)) == 0

    def test_chain(self, chain2):
        assert expected_reward(chain2.weight_vector(), chain2.indexer, (0, 0)) == pytest.approx(0.65)

    def test_all_27(self, graph333):
        w = graph333.weight_vector()
        got = expected_rewards(w, graph333.indexer, graph333.creatives)
        want = [eq2_score(graph333, tuple(c)) for c in graph333.creatives]
        assert len(got) == 27
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestUpdate:
    def test_unit_basis(self):
        post = PosteriorState(4)
        post.update(np.eye(4)[2], 1)
        assert post.B[2, 2] == 2.0
        assert post.w_mean[2] == pytest.approx(0.5)
        assert post.update_count == 1

    def test_zero_reward_leaves_f(self, rng):
        post = PosteriorState(5)
        x = rng.random(5)
        post.update(x, 0)
        assert np.array_equal(post.f, np.zeros(5))
        np.testing.assert_allclose(post.B, np.eye(5) + np.outer(x, x))

    def test_consistency_with_more_data(self, rng):
        K = 8
        w_star = rng.normal(0, 0.3, K)
        X = binary_design(rng, 500, K)
        r = X @ w_star + rng.normal(0, 0.1, 500)
        post = PosteriorState(K)
        errs = {}
        for t in range(500):
            post.update(X[t], r[t])
            if t + 1 in (50, 500):
                errs[t + 1] = np.linalg.norm(post.w_mean - w_star)
        assert errs[500] < errs[50]

    def test_batch_matches_sequential(self, rng):
        K = 6
        X = binary_design(rng, 300, K)
        r = (rng.random(300) < 0.2).astype(float)
        a, b = PosteriorState(K), PosteriorState(K)
        for x, y in zip(X, r):
            a.update(x, y)
        b.update_batch(X, r)
        np.testing.assert_allclose(a.w_mean, b.w_mean, atol=1e-10)
        np.testing.assert_allclose(a.B, b.B)
        assert a.update_count == b.update_count == 300

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 400), st.integers(0, 2**32 - 1))
    def test_symmetry_and_fresh_solve(self, n, seed):
        rng = np.random.default_rng(seed)
        K = 7
        X = binary_design(rng, n, K)
        r = (rng.random(n) < 0.3).astype(float)
        post = PosteriorState(K, recompute_interval=97)
        for x, y in zip(X, r):
            post.update(x, y)
            assert np.array_equal(post.B, post.B.T)
        assert np.abs(post.w_mean - ridge(X, r, K)).max() < 1e-8
        post.check(1e-8)

    def test_trace_contracts(self, rng):
        post = PosteriorState(6, sigma=0.7)
        prev = np.trace(post.covariance())
        for x in binary_design(rng, 200, 6):
            post.update(x, 1)
            cur = np.trace(post.covariance())
            assert cur <= prev + 1e-12
            prev = cur

    def test_drift_is_recorded_at_recompute(self, rng):
        post = PosteriorState(10, recompute_interval=50)
        for x in binary_design(rng, 50, 10):
            post.update(x, 0)
        assert 0.0 <= post.last_drift < 1e-10

    def test_corrupted_posterior_raises(self):
        post = PosteriorState(3)
        post.B[:] = -np.eye(3)
        with pytest.raises(PosteriorError):
            post.recompute()


class TestSample:
    def test_sigma_zero_is_mean(self, rng):
        post = PosteriorState(4, sigma=0.0)
        post.update(np.ones(4), 1)
        assert np.array_equal(post.sample(rng), post.w_mean)

    def test_fresh_prior_moments(self):
        draws = PosteriorState(6).sample_many(10_000, np.random.default_rng(0))
        assert np.abs(draws.mean(axis=0)).max() < 0.05
        var = draws.var(axis=0)
        assert np.all(np.abs(var - 1.0) < 0.05)

    def test_covariance_after_updates(self, rng):
        K = 4
        post = PosteriorState(K, sigma=0.8)
        for x in binary_design(rng, 40, K, p=0.5):
            post.update(x, 1)
        draws = post.sample_many(200_000, np.random.default_rng(1))
        emp = np.cov(draws, rowvar=False)
        target = post.covariance()
        se = np.sqrt((target ** 2 + np.outer(np.diag(target), np.diag(target))) / len(draws))
        assert np.all(np.abs(emp - target) < 5 * se)
        np.testing.assert_allclose(draws.mean(axis=0), post.w_mean, atol=5 * np.sqrt(target.diagonal().max() / len(draws)))

    def test_seeded(self):
        post = PosteriorState(5)
        a = post.sample(np.random.default_rng(3))
        b = post.sample(np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            PosteriorState(3, sigma=-1)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        post = PosteriorState(5, sigma=0.5, recompute_interval=30)
        for x in binary_design(rng, 70, 5):
            post.update(x, float(rng.random() < 0.4))
        path = tmp_path / "post.txt"
        post.save(path)
        assert path.read_text().splitlines()[0] == CHECKPOINT_HEADER
        back = PosteriorState.load(path)
        assert np.array_equal(back.B, post.B) and np.array_equal(back.f, post.f)
        assert (back.sigma, back.update_count, back.recompute_interval) == (0.5, 70, 30)
        np.testing.assert_allclose(back.w_mean, post.w_mean, atol=1e-10)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "x.txt"
        p.write_text("nope\n")
        with pytest.raises(ValueError):
            PosteriorState.load(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x.txt"
        p.write_text(f"{CHECKPOINT_HEADER}\n3 1.0 0 1000\n1 0 0\n")
        with pytest.raises(ValueError, match="truncated"):
            PosteriorState.load(p)


def test_default_graph_dimension():
    tree = IngredientTree.from_counts([2, 5, 4, 5, 1], [None, 0, 1, 0, 3])
    assert build_element_graph(tree).indexer.dimension == 63
