"""Evaluation quantities: discounted covariances, coverage, accuracy, regret."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nsdpo.core import DriftSchedule, Environment, OfflineDataset, TestSet
from nsdpo.objectives import discount_weights, implicit_reward_diff

__all__ = [
    "AssumptionViolation",
    "KappaEstimate",
    "RegretEstimate",
    "weighted_covariance",
    "sigma_hat",
    "sigma_tilde",
    "policy_probs",
    "population_covariance",
    "condition_number_kappa",
    "omega_bar",
    "reward_accuracy",
    "expected_regret",
    "estimation_error",
]


class AssumptionViolation(ValueError):
    """The reference policy does not cover the feature space."""


@dataclass
class KappaEstimate:
    kappa: float
    lambda_max_pi: float
    lambda_min_ref: float
    n_mc: int


@dataclass
class RegretEstimate:
    value: float
    std_error: float
    n_contexts: int

    def to_dict(self) -> dict:
        return {"value": self.value, "std_error": self.std_error, "n_contexts": self.n_contexts}


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def weighted_covariance(phi_diff: np.ndarray, weights: np.ndarray, n: int | None = None) -> np.ndarray:
    """``1/n sum_i w_i phi_i phi_i^T``."""
    phi_diff = np.asarray(phi_diff, dtype=float)
    if phi_diff.shape[0] == 0:
        raise ValueError("covariance of an empty dataset")
    n = phi_diff.shape[0] if n is None else n
    return _symmetrize((phi_diff * np.asarray(weights)[:, None]).T @ phi_diff / n)


def sigma_hat(dataset: OfflineDataset, gamma: float, T: int | None = None) -> np.ndarray:
    """Discounted covariance of feature differences, weights ``gamma^(T - t_i - 1)``."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    T = dataset.T if T is None else T
    return weighted_covariance(dataset.phi_diff, discount_weights(dataset.t, T, gamma))


def sigma_tilde(dataset: OfflineDataset, gamma: float, T: int | None = None) -> np.ndarray:
    """As :func:`sigma_hat` with squared discount weights."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    T = dataset.T if T is None else T
    return weighted_covariance(dataset.phi_diff, discount_weights(dataset.t, T, gamma) ** 2)


def policy_probs(all_phi: np.ndarray, theta) -> np.ndarray:
    """Softmax log-linear policy over the action axis of ``all_phi`` (shape ``(n, A, d)``)."""
    logits = all_phi @ np.asarray(theta, dtype=float)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def population_covariance(theta, env: Environment, n_mc: int, seed: int = 0, contexts=None, rotation=None) -> np.ndarray:
    """Monte-Carlo ``Cov[phi(x, a)]`` for ``x ~ U[0,1]^d_x`` and ``a ~ pi_theta(.|x)``.

    The expectation over actions is exact; only contexts are sampled.
    ``rotation`` (an orthogonal ``d x d`` matrix) is applied to every feature.
    """
    if contexts is None:
        contexts = np.random.default_rng(seed).random((n_mc, env.d_x))
    phi = env.all_features(contexts)
    if rotation is not None:
        phi = phi @ np.asarray(rotation).T
    p = policy_probs(phi, theta)
    mean = np.einsum("na,nad->d", p, phi) / len(contexts)
    second = np.einsum("na,nad,nae->de", p, phi, phi) / len(contexts)
    return _symmetrize(second - np.outer(mean, mean))


def condition_number_kappa(theta_pi, theta_ref, env: Environment, n_mc: int, seed: int = 0, rotation=None, tol: float = 1e-12) -> KappaEstimate:
    """``lambda_max(Sigma_pi) / lambda_min(Sigma_ref)``, with both covariances on shared contexts."""
    d = env.d
    if n_mc < 10 * d * d:
        raise ValueError(f"n_mc must be at least 10 d^2 = {10 * d * d}")
    contexts = np.random.default_rng(seed).random((n_mc, env.d_x))
    cov_pi = population_covariance(theta_pi, env, n_mc, contexts=contexts, rotation=rotation)
    cov_ref = population_covariance(theta_ref, env, n_mc, contexts=contexts, rotation=rotation)
    lam_min_ref = float(np.linalg.eigvalsh(cov_ref)[0])
    if lam_min_ref <= tol:
        raise AssumptionViolation(f"reference covariance has lambda_min = {lam_min_ref:.3g} <= {tol}")
    lam_max_pi = float(np.linalg.eigvalsh(cov_pi)[-1])
    return KappaEstimate(lam_max_pi / lam_min_ref, lam_max_pi, lam_min_ref, n_mc)


def omega_bar(T: int, gamma: float, m_lower: float, m_upper: float) -> float:
    """Upper bound ``m_upper (T-1)(1-gamma) / (m_lower (1 - gamma^(T-1)))``; ``m_upper/m_lower`` at ``gamma = 1``."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if gamma == 1:
        return m_upper / m_lower
    # (1-g)(T-1)/(1-g^(T-1)) = (T-1) / sum_{k<T-1} g^k, stable as g -> 1
    geom = -np.expm1((T - 1) * np.log(gamma)) / -np.expm1(np.log(gamma))
    return float(m_upper * (T - 1) / (m_lower * geom))


def reward_accuracy(theta, theta_ref, test_set: TestSet, tau: float = 1.0) -> float:
    """Share of test pairs whose implicit-reward sign matches the true preference.

    Ties (zero implicit reward or ``p_true == 1/2``) earn half credit.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    h = implicit_reward_diff(theta, theta_ref, test_set.phi_diff, tau)
    pred = np.sign(h)
    truth = np.sign(test_set.p_true - 0.5)
    credit = np.where((pred == 0) | (truth == 0), 0.5, (pred == truth).astype(float))
    return float(credit.mean())


def expected_regret(
    theta_tilde,
    schedule: DriftSchedule,
    env: Environment,
    n_contexts: int,
    seed: int = 0,
    theta_ref=None,
    at_step: int | None = None,
    per_context: bool = False,
):
    """Raw-reward gap between the optimal softmax policy and ``pi_theta_tilde``.

    The true reward is ``tau <phi(x,a), theta*_T - theta_ref>``; the optimal
    policy of the KL-regularised objective is then the log-linear policy with
    parameter ``theta*_T``.  Both policies are evaluated on the same sampled
    contexts with exact expectations over actions.
    """
    at_step = schedule.T if at_step is None else at_step
    theta_star = schedule.theta_at(at_step)
    ref = np.zeros(env.d) if theta_ref is None else np.asarray(theta_ref, dtype=float)
    contexts = np.random.default_rng(seed).random((n_contexts, env.d_x))
    phi = env.all_features(contexts)
    reward = env.tau * (phi @ (theta_star - ref))
    gap = np.einsum("na,na->n", policy_probs(phi, theta_star) - policy_probs(phi, theta_tilde), reward)
    se = float(gap.std(ddof=1) / np.sqrt(n_contexts)) if n_contexts > 1 else 0.0
    est = RegretEstimate(float(gap.mean()), se, n_contexts)
    return (est, gap) if per_context else est


def estimation_error(theta_tilde, theta_star, dataset: OfflineDataset, gamma: float, T: int | None = None, lam: float = 1.0) -> float:
    """``||theta_tilde - theta_star||`` in the ``Sigma_hat + lambda I`` norm."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    diff = np.asarray(theta_tilde, dtype=float) - np.asarray(theta_star, dtype=float)
    A = sigma_hat(dataset, gamma, T) + lam * np.eye(len(diff))
    return float(np.sqrt(max(diff @ A @ diff, 0.0)))
