"""Computable pieces of the NS-DPO estimation and regret bounds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from nsdpo._math import sigmoid, sigmoid_prime
from nsdpo.core import DriftSchedule, OfflineDataset
from nsdpo.metrics import sigma_hat, weighted_covariance
from nsdpo.objectives import discount_weights

__all__ = [
    "TheoryConfig",
    "BoundBreakdown",
    "NonlinearityCoeffs",
    "PSDCheck",
    "ErrorDecomposition",
    "QuadratureError",
    "nonlinearity_coeffs",
    "variation_budget",
    "gamma_from_budget",
    "gamma_condition",
    "estimation_bound_rhs",
    "alpha_coefficients",
    "g_matrix",
    "gt_psd_check",
    "error_decomposition",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(33)
# map from [-1, 1] to [0, 1]
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


class QuadratureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TheoryConfig:
    W: float
    L: float
    tau: float
    lam: float
    delta: float
    d: int
    T: int
    n: int
    m_lower: float
    m_upper: float
    B_T: float
    r_max: float
    C1: float = 1.0
    C2: float = 0.5
    kappa: float = 1.0

    def __post_init__(self):
        if not 0 < self.delta <= 0.5:
            raise ValueError("delta must lie in (0, 1/2]")
        if not 0 < self.C2 < 1:
            raise ValueError("C2 must lie in (0, 1)")
        for name in ("W", "L", "tau", "C1", "kappa", "m_lower", "m_upper", "r_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.B_T < 0:
            raise ValueError("lambda and B_T must be nonnegative")
        if self.n < 1 or self.d < 1 or self.T < 2:
            raise ValueError("need n >= 1, d >= 1, T >= 2")

    def replace(self, **kw) -> "TheoryConfig":
        return TheoryConfig(**{**asdict(self), **kw})


@dataclass
class BoundBreakdown:
    learning_term: float
    tracking_term: float
    regret_prefactor: float
    regret_bound: float

    @property
    def estimation_bound(self) -> float:
        return self.learning_term + self.tracking_term


@dataclass
class NonlinearityCoeffs:
    k_sigma: float
    c_sigma: float
    R_sigma: float


@dataclass
class PSDCheck:
    passed: bool
    min_eig: float


@dataclass
class ErrorDecomposition:
    xi_learn: float
    xi_track: float


def nonlinearity_coeffs(tau: float, L: float, W: float) -> NonlinearityCoeffs:
    """Sup and inf of the sigmoid slope over logits ``|tau <phi_diff, theta>| <= 2 tau L W``."""
    if tau < 0 or L < 0 or W < 0:
        raise ValueError("tau, L, W must be nonnegative")
    k = 0.25
    c = float(sigmoid_prime(2.0 * tau * L * W))
    return NonlinearityCoeffs(k, c, k / c)


def variation_budget(schedule: DriftSchedule) -> float:
    """Path length ``sum_t ||theta*_{t+1} - theta*_t||`` over ``t = 1..T-1``."""
    th = schedule.thetas()
    return float(np.linalg.norm(np.diff(th, axis=0), axis=1).sum())


def gamma_from_budget(B_T: float, d: int, T: int) -> float:
    """Discount ``1 - sqrt(B_T / (d T))``; requires ``0 < B_T < d T``."""
    if not 0 < B_T < d * T:
        raise ValueError(f"need 0 < B_T < d T = {d * T}, got {B_T}")
    return 1.0 - math.sqrt(B_T / (d * T))


def gamma_condition(B_T: float, d: int, T: int) -> tuple[float, float]:
    """Both sides of ``2 / (T (1 - gamma)) >= T^-1/2 d^1/2 B_T^-1/2`` at ``gamma_from_budget``.

    With that choice ``1 / (T (1 - gamma))`` equals the right-hand side
    exactly, so the left side is twice the right.
    """
    g = gamma_from_budget(B_T, d, T)
    return 2.0 / (T * (1.0 - g)), T**-0.5 * d**0.5 * B_T**-0.5


def estimation_bound_rhs(cfg: TheoryConfig, gamma: float, c_sigma: float | None = None) -> BoundBreakdown:
    """Learning and tracking terms of the estimation bound and the regret bound built on them."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    coeffs = nonlinearity_coeffs(cfg.tau, cfg.L, cfg.W)
    cs = coeffs.c_sigma if c_sigma is None else c_sigma
    Rs = coeffs.k_sigma / cs
    learning = 2.0 * math.sqrt(cfg.lam) * cfg.W + (2.0 * cfg.C1 / (cfg.tau * cs)) * math.sqrt((cfg.d + math.log(1.0 / cfg.delta)) / cfg.n)
    tracking = (16.0 * cfg.L * Rs * cfg.m_upper / (cfg.T * (1.0 - gamma) ** 1.5)) * math.sqrt(cfg.d * cfg.m_upper / cfg.n) * cfg.B_T
    prefactor = cfg.r_max * math.sqrt(cfg.m_upper * cfg.T * (1.0 - gamma) * cfg.kappa) / (
        cfg.C2 * math.sqrt(2.0 * cfg.m_lower * (1.0 - gamma ** (cfg.T - 1)))
    )
    return BoundBreakdown(learning, tracking, prefactor, prefactor * (learning + tracking))


def alpha_coefficients(phi_diff, theta_a, theta_b, tau: float, theta_ref=None, rtol: float = 1e-10) -> np.ndarray:
    """Mean sigmoid slope along the segment from ``theta_b`` to ``theta_a`` for each row.

    33-point Gauss-Legendre on ``[0, 1]``; checked against the closed form
    ``(s(z_a) - s(z_b)) / (z_a - z_b)`` and rejected if they disagree.
    """
    phi_diff = np.asarray(phi_diff, dtype=float)
    ref = 0.0 if theta_ref is None else np.asarray(theta_ref, dtype=float)
    za = tau * phi_diff @ (np.asarray(theta_a, dtype=float) - ref)
    zb = tau * phi_diff @ (np.asarray(theta_b, dtype=float) - ref)
    z = zb[:, None] + _GL_NODES[None, :] * (za - zb)[:, None]
    alpha = sigmoid_prime(z) @ _GL_WEIGHTS
    dz = za - zb
    wide = np.abs(dz) > 1e-3
    exact = sigmoid_prime(0.5 * (za + zb))
    exact = np.where(wide, (sigmoid(za) - sigmoid(zb)) / np.where(wide, dz, 1.0), exact)
    err = np.abs(alpha - exact)
    # narrow segments: midpoint slope differs from the mean by O(dz^2)
    tol = rtol * np.maximum(exact, 1e-300) + np.where(wide, 0.0, dz**2 / 100.0)
    if np.any(err > tol):
        i = int(np.argmax(err - tol))
        raise QuadratureError(f"quadrature did not converge for row {i}: {alpha[i]!r} vs {exact[i]!r}")
    return alpha


def g_matrix(phi_diff, t, T: int, gamma: float, theta_a, theta_b, tau: float, lam: float, c_sigma: float, theta_ref=None) -> np.ndarray:
    alpha = alpha_coefficients(phi_diff, theta_a, theta_b, tau, theta_ref)
    w = discount_weights(t, T, gamma) * alpha
    return weighted_covariance(phi_diff, w) + lam * c_sigma * np.eye(np.shape(phi_diff)[1])


def gt_psd_check(theta_a, theta_b, dataset: OfflineDataset, gamma: float, T: int | None, tau: float, lam: float, c_sigma: float, theta_ref=None, tol: float = 1e-8) -> PSDCheck:
    """Smallest eigenvalue of ``G_T - c_sigma (Sigma_hat + lambda I)`` and whether it clears ``-tol``."""
    T = dataset.T if T is None else T
    G = g_matrix(dataset.phi_diff, dataset.t, T, gamma, theta_a, theta_b, tau, lam, c_sigma, theta_ref)
    A = sigma_hat(dataset, gamma, T) + lam * np.eye(G.shape[0])
    min_eig = float(np.linalg.eigvalsh(G - c_sigma * A)[0])
    return PSDCheck(min_eig >= -tol, min_eig)


def error_decomposition(
    dataset: OfflineDataset,
    schedule: DriftSchedule,
    gamma: float,
    tau: float,
    lam: float,
    c_sigma: float,
    T: int | None = None,
    theta_ref=None,
    soft_labels: bool = False,
) -> ErrorDecomposition:
    """Learning and tracking parts of the estimation error, evaluated from data at known ``theta*``.

    ``soft_labels`` replaces each observed label by its true probability, so
    the noise residuals vanish and only drift (and the regulariser) remain.
    """
    T = dataset.T if T is None else T
    d = dataset.phi_diff.shape[1]
    ref = np.zeros(d) if theta_ref is None else np.asarray(theta_ref, dtype=float)
    A = sigma_hat(dataset, gamma, T) + lam * np.eye(d)
    if np.linalg.matrix_rank(A) < d:
        raise np.linalg.LinAlgError("Sigma_hat + lambda I is singular")
    w = discount_weights(dataset.t, T, gamma)
    theta_T = schedule.theta_at(T)
    # same reduction for both so a constant schedule cancels bit-for-bit
    p_t = sigmoid(tau * np.einsum("ij,ij->i", dataset.phi_diff, schedule.thetas(dataset.t) - ref))
    p_T = sigmoid(tau * np.einsum("ij,ij->i", dataset.phi_diff, np.broadcast_to(theta_T - ref, dataset.phi_diff.shape)))
    labels = p_t if soft_labels else dataset.label
    eps = labels - p_t
    n = len(dataset)
    scale = 2.0 / (tau**2 * c_sigma)

    def inv_norm(v):
        return float(np.sqrt(max(v @ np.linalg.solve(A, v), 0.0)))

    learn_vec = (tau * w * eps) @ dataset.phi_diff / n - lam * c_sigma * tau**2 * theta_T
    track_vec = (tau * w * (p_t - p_T)) @ dataset.phi_diff / n
    return ErrorDecomposition(scale * inv_norm(learn_vec), scale * inv_norm(track_vec))
