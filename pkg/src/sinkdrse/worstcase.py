"""Worst-case Gaussian mixture of the Sinkhorn ball at a dual optimum.

Component ``i`` has density ``v_i exp(x'Ux + u_i'x)``, all components share the
precision ``-2U`` and the mixture weights are uniform.  ``v_i`` is kept in log
form since it under- or overflows for small ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .ambiguity import SampleSet, SinkhornConfig, omega
from .conic import NotPositiveDefiniteError, cholesky, logdet_psd


class NotNegativeDefiniteError(ValueError):
    def __init__(self, eig: float):
        super().__init__(f"U must be negative definite, largest eigenvalue {eig:.3e}")
        self.eig = eig


@dataclass(frozen=True)
class WorstCaseMixture:
    """``(1/N) sum_i v_i exp(x'Ux + u_i'x)``."""

    U: np.ndarray
    u: np.ndarray
    log_v: np.ndarray
    epsilon: float
    lambda_star: float

    @property
    def v(self) -> np.ndarray:
        return np.exp(self.log_v)

    @property
    def N(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.U.shape[0]

    def covariance(self) -> np.ndarray:
        """Shared component covariance ``(-2U)^{-1}``."""
        C = np.linalg.inv(-2.0 * self.U)
        return 0.5 * (C + C.T)

    def means(self) -> np.ndarray:
        """Component means ``-U^{-1} u_i / 2``, one per row."""
        return -0.5 * np.linalg.solve(self.U, self.u.T).T

    def component_log_mass(self) -> np.ndarray:
        """Log of each component's integral over the whole space."""
        negU = -self.U
        quad = np.einsum("ij,ij->i", self.u, np.linalg.solve(negU, self.u.T).T)
        return self.log_v + 0.5 * self.n * np.log(np.pi) - 0.5 * logdet_psd(negU) + 0.25 * quad

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        expo = np.einsum("kj,jl,kl->k", x, self.U, x)[:, None] + x @ self.u.T + self.log_v[None, :]
        return logsumexp(expo, axis=1) - np.log(self.N)

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))


@dataclass(frozen=True)
class MarginalMixture:
    """One-dimensional marginal ``(1/N) sum_i v'_i exp(U' x^2 + u'_i x)``."""

    Uprime: float
    uprime: np.ndarray
    log_vprime: np.ndarray
    dim: int

    @property
    def vprime(self) -> np.ndarray:
        return np.exp(self.log_vprime)

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        expo = self.Uprime * x[:, None] ** 2 + x[:, None] * self.uprime[None, :] + self.log_vprime[None, :]
        return logsumexp(expo, axis=1) - np.log(self.uprime.size)

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def mass(self) -> float:
        """Total mass from closed-form 1-D Gaussian integrals."""
        a = -self.Uprime
        logm = self.log_vprime + 0.5 * np.log(np.pi / a) + self.uprime ** 2 / (4 * a)
        return float(np.exp(logsumexp(logm) - np.log(self.uprime.size)))


def mixture_from_loss(M_loss, lambda_star: float, samples, epsilon: float, Omega) -> WorstCaseMixture:
    """Build the mixture from a loss matrix ``M_loss = Q'Phi'Phi Q``.

    ``lambda_star*Omega - M_loss`` must be positive definite.
    """
    if not epsilon > 0:
        raise ValueError("the worst-case mixture needs eps > 0")
    if not lambda_star > 0:
        raise ValueError(f"lambda_star must be positive, got {lambda_star}")
    xi = samples.samples if isinstance(samples, SampleSet) else np.atleast_2d(np.asarray(samples, dtype=float))
    M_loss = np.asarray(M_loss, dtype=float)
    n = M_loss.shape[0]
    K = lambda_star * np.asarray(Omega, dtype=float) - M_loss
    K = 0.5 * (K + K.T)
    try:
        ldK = 2.0 * float(np.sum(np.log(np.diag(cholesky(K)))))
    except NotPositiveDefiniteError:
        raise NotNegativeDefiniteError(float(-np.linalg.eigvalsh(K)[0])) from None
    le = lambda_star * epsilon
    U = -K / le
    u = (2.0 / epsilon) * xi
    # xi' U^{-1} xi / eps^2 = -(lam/eps) xi' K^{-1} xi
    quad = np.einsum("ij,ij->i", xi, np.linalg.solve(K, xi.T).T)
    log_v = 0.5 * ldK - 0.5 * n * np.log(np.pi * le) - (lambda_star / epsilon) * quad
    return WorstCaseMixture(U, u, log_v, float(epsilon), float(lambda_star))


def worst_case_mixture(maps, lambda_star: float, samples, cfg: SinkhornConfig, ops) -> WorstCaseMixture:
    """Worst-case mixture at an optimal ``(Phi, lambda)``."""
    return mixture_from_loss(ops.quad(maps.Phi), lambda_star, samples, cfg.epsilon, omega(cfg))


def mixture_component_moments(mix: WorstCaseMixture, i: int):
    """Mean and covariance of component ``i``."""
    return mix.means()[i], mix.covariance()


def expected_loss(mix: WorstCaseMixture, M) -> float:
    """``E[x'Mx]`` under the mixture, in closed form."""
    M = np.asarray(M, dtype=float)
    mu = mix.means()
    return float(np.sum(M * mix.covariance()) + np.mean(np.einsum("ij,jk,ik->i", mu, M, mu)))


def marginal_density(mix: WorstCaseMixture, dim: int = 0) -> MarginalMixture:
    """Marginal of coordinate ``dim`` (zero-based) by Schur complement."""
    n = mix.n
    if not 0 <= dim < n:
        raise IndexError(f"dim {dim} out of range for dimension {n}")
    if n == 1:
        return MarginalMixture(float(mix.U[0, 0]), mix.u[:, 0].copy(), mix.log_v.copy(), dim)
    rest = [j for j in range(n) if j != dim]
    U11 = mix.U[dim, dim]
    U12 = mix.U[dim, rest]
    U22 = mix.U[np.ix_(rest, rest)]
    u1 = mix.u[:, dim]
    u2 = mix.u[:, rest]
    W = np.linalg.solve(U22, u2.T).T  # rows U22^{-1} u_{i,2}
    g = np.linalg.solve(U22, U12)
    Up = float(U11 - U12 @ g)
    up = u1 - u2 @ g
    log_vp = (0.5 * (n - 1) * np.log(2 * np.pi) - 0.5 * logdet_psd(-2.0 * U22)
              + mix.log_v - 0.25 * np.einsum("ij,ij->i", u2, W))
    return MarginalMixture(Up, up, log_vp, dim)


def sample_mixture(mix: WorstCaseMixture, n: int, seed=None) -> np.ndarray:
    """``n`` draws, component chosen uniformly then Gaussian."""
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, mix.N, size=n)
    L = np.linalg.cholesky(mix.covariance())
    z = rng.standard_normal((n, mix.n))
    return mix.means()[comp] + z @ L.T
