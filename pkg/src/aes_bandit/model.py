"""Linear CTR estimator and its Gaussian (Bayesian ridge) posterior."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import linalg

from .graph import FeatureIndexer

CHECKPOINT_HEADER = "AES-POSTERIOR-v1"


class PosteriorError(RuntimeError):
    """The maintained inverse is no longer numerically positive definite."""


def expected_reward(weights, indexer: FeatureIndexer, creative) -> float:
    """Bias plus chosen vertex weights plus chosen tree-edge weights."""
    idx = indexer.indices([creative])[0]
    return float(np.asarray(weights, dtype=float)[idx].sum())


def expected_rewards(weights, indexer: FeatureIndexer, choices) -> np.ndarray:
    """Vectorised :func:`expected_reward` over an ``(S, N)`` choice array."""
    idx = indexer.indices(choices)
    return np.asarray(weights, dtype=float)[idx].sum(axis=1)


class PosteriorState:
    """Gaussian posterior N(w_mean, sigma^2 B^-1) with B = I + sum x x^T, f = sum r x.

    Single observations go through a Sherman-Morrison update of ``B_inv``; every
    ``recompute_interval`` updates the inverse is rebuilt from ``B`` by Cholesky.
    Batches (:meth:`update_batch`) add the whole Gram block and refactor once.
    """

    def __init__(self, dimension: int, sigma: float = 1.0, recompute_interval: int = 1000):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.dimension = int(dimension)
        self.sigma = float(sigma)
        self.recompute_interval = int(recompute_interval)
        self.reset()

    def reset(self):
        K = self.dimension
        self.B = np.eye(K)
        self.B_inv = np.eye(K)
        self.f = np.zeros(K)
        self.w_mean = np.zeros(K)
        self.update_count = 0
        self._since_recompute = 0
        self._factor = None
        self.last_drift = 0.0

    def update(self, x, reward) -> None:
        x = np.asarray(x, dtype=float)
        Bx = self.B_inv @ x
        self.B += np.outer(x, x)
        self.B_inv -= np.outer(Bx, Bx) / (1.0 + x @ Bx)
        self.B_inv = 0.5 * (self.B_inv + self.B_inv.T)
        if reward:
            self.f += reward * x
        self.update_count += 1
        self._since_recompute += 1
        self._factor = None
        if self.recompute_interval and self._since_recompute >= self.recompute_interval:
            self.recompute()
        else:
            self.w_mean = self.B_inv @ self.f

    def update_batch(self, X, rewards) -> None:
        """Apply a block of observations (rows of ``X``) and refactor once."""
        X = np.asarray(X, dtype=float)
        if len(X) == 0:
            return
        rewards = np.asarray(rewards, dtype=float)
        self.B += X.T @ X
        self.B = 0.5 * (self.B + self.B.T)
        self.f += X.T @ rewards
        self.update_count += len(X)
        self.recompute()

    def recompute(self) -> None:
        """Rebuild ``B_inv`` and ``w_mean`` from ``B`` and ``f`` by Cholesky."""
        try:
            cf = linalg.cho_factor(self.B, lower=True)
        except linalg.LinAlgError as exc:
            raise PosteriorError(f"B is not positive definite: {exc}") from None
        fresh = linalg.cho_solve(cf, np.eye(self.dimension))
        fresh = 0.5 * (fresh + fresh.T)
        self.last_drift = float(np.abs(self.B_inv - fresh).max())
        self.B_inv = fresh
        self.w_mean = linalg.cho_solve(cf, self.f)
        self._since_recompute = 0
        self._factor = None

    def _cov_factor(self) -> np.ndarray:
        if self._factor is None:
            try:
                self._factor = np.linalg.cholesky(self.B_inv)
            except np.linalg.LinAlgError:
                raise PosteriorError("B_inv is not numerically positive definite") from None
        return self._factor

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.sample_many(1, rng)[0]

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` draws, shape ``(n, K)``, from the posterior at its current (frozen) state."""
        if self.sigma == 0.0:
            return np.tile(self.w_mean, (n, 1))
        try:
            L = self._cov_factor()
        except PosteriorError:
            self.recompute()
            L = self._cov_factor()
        z = rng.standard_normal((n, self.dimension))
        return self.w_mean + self.sigma * (z @ L.T)

    def covariance(self) -> np.ndarray:
        return self.sigma ** 2 * self.B_inv

    def inverse_residual(self) -> float:
        """``||B B_inv - I||_inf`` (max abs entry)."""
        return float(np.abs(self.B @ self.B_inv - np.eye(self.dimension)).max())

    def check(self, tol: float = 1e-8) -> None:
        if not np.array_equal(self.B, self.B.T):
            raise PosteriorError("B is not symmetric")
        res = self.inverse_residual()
        if res > tol:
            raise PosteriorError(f"inverse residual {res:.3g} exceeds {tol:g}")
        if np.abs(self.B_inv @ self.f - self.w_mean).max() > tol:
            raise PosteriorError("w_mean is out of sync with B_inv f")

    def copy(self) -> "PosteriorState":
        other = PosteriorState(self.dimension, self.sigma, self.recompute_interval)
        other.B, other.B_inv = self.B.copy(), self.B_inv.copy()
        other.f, other.w_mean = self.f.copy(), self.w_mean.copy()
        other.update_count = self.update_count
        other._since_recompute = self._since_recompute
        return other

    # -- checkpoints -------------------------------------------------------------------

    def save(self, path) -> None:
        """Text checkpoint: header, ``K sigma update_count recompute_interval``, B rows, f."""
        lines = [CHECKPOINT_HEADER,
                 f"{self.dimension} {self.sigma!r} {self.update_count} {self.recompute_interval}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.B]
        lines.append(" ".join(repr(float(v)) for v in self.f))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PosteriorState":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != CHECKPOINT_HEADER:
            raise ValueError(f"{path}: not a {CHECKPOINT_HEADER} checkpoint")
        k, sigma, count, interval = lines[1].split()
        K = int(k)
        if len(lines) < K + 3:
            raise ValueError(f"{path}: truncated checkpoint")
        state = cls(K, float(sigma), int(interval))
        state.B = np.array([[float(v) for v in lines[2 + r].split()] for r in range(K)])
        state.f = np.array([float(v) for v in lines[2 + K].split()])
        if state.B.shape != (K, K) or state.f.shape != (K,):
            raise ValueError(f"{path}: malformed matrix block")
        state.update_count = int(count)
        state.recompute()
        return state
