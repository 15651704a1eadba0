"""Sinkhorn ambiguity-set parameters.

Holds the sample set, the Gaussian reference covariance, the regularized
matrix ``Omega = I + (eps/2) Sigma^{-1}``, the nonemptiness threshold
``theta_0`` and the finite-sample radius.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .conic import cholesky, NotPositiveDefiniteError


@dataclass(frozen=True)
class SampleSet:
    """``N`` samples of the stacked uncertainty, one per row."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.shape[0] < 1 or s.size == 0:
            raise ValueError("a sample set needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples contain non-finite entries")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def N(self) -> int:
        return self.samples.shape[0]

    @property
    def n_xi(self) -> int:
        return self.samples.shape[1]

    def second_moment(self) -> np.ndarray:
        """``(1/N) sum xi xi'``."""
        return self.samples.T @ self.samples / self.N

    def mean_sq_norm(self) -> float:
        return float(np.sum(self.samples ** 2) / self.N)

    @classmethod
    def from_csv(cls, path) -> "SampleSet":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
        try:
            data = np.array([[float(v) for v in r] for r in rows])
        except ValueError as exc:
            raise ValueError(f"{path}: samples must be numeric, one vector per row") from exc
        return cls(data)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in self.samples:
                w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class SinkhornConfig:
    """Radius, regularization and reference covariance of the ambiguity set.

    ``kappa=None`` selects ``1e-6 * ||Omega||_2``.
    """

    epsilon: float
    theta: float
    Sigma: np.ndarray
    kappa: float | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-12):
            raise ValueError("Sigma must be square symmetric")
        try:
            cholesky(S)
        except NotPositiveDefiniteError as exc:
            raise ValueError(f"Sigma is not positive definite (pivot {exc.pivot})") from exc
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.kappa is not None and not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        S = 0.5 * (S + S.T)
        S.setflags(write=False)
        object.__setattr__(self, "Sigma", S)

    @property
    def n_xi(self) -> int:
        return self.Sigma.shape[0]

    @property
    def Sigma_eig(self):
        if "eig" not in self._cache:
            self._cache["eig"] = np.linalg.eigh(self.Sigma)
        return self._cache["eig"]

    @property
    def Sigma_sqrt(self) -> np.ndarray:
        w, V = self.Sigma_eig
        return (V * np.sqrt(w)) @ V.T

    @property
    def kappa_value(self) -> float:
        if self.kappa is not None:
            return float(self.kappa)
        return 1e-6 * float(np.linalg.norm(omega(self), 2))

    def replace(self, **kw) -> "SinkhornConfig":
        d = dict(epsilon=self.epsilon, theta=self.theta, Sigma=self.Sigma, kappa=self.kappa)
        d.update(kw)
        return SinkhornConfig(**d)


def omega(cfg: SinkhornConfig) -> np.ndarray:
    """``I + (eps/2) Sigma^{-1}``."""
    if "omega" not in cfg._cache:
        w, V = cfg.Sigma_eig
        Om = (V * (1.0 + 0.5 * cfg.epsilon / w)) @ V.T
        Om = 0.5 * (Om + Om.T)
        Om.setflags(write=False)
        cfg._cache["omega"] = Om
    return cfg._cache["omega"]


def feasibility_threshold(samples: SampleSet, cfg: SinkhornConfig) -> float:
    """Smallest radius for which the Sinkhorn ball is nonempty.

    The three log-det terms combine to ``(eps/2) sum log(1 + 2 s_j/eps)`` over
    the eigenvalues ``s_j`` of ``Sigma``, evaluated with ``log1p`` so large
    ``eps`` does not cancel catastrophically.
    """
    eps = cfg.epsilon
    if eps == 0:
        return 0.0
    w, V = cfg.Sigma_eig
    logs = 0.5 * eps * float(np.sum(np.log1p(2.0 * w / eps)))
    # I - Omega^{-1} has eigenvalues (eps/2) / (s + eps/2)
    shrink = (V * (0.5 * eps / (w + 0.5 * eps))) @ V.T
    quad = float(np.sum((samples.samples @ shrink) * samples.samples)) / samples.N
    return logs + quad


def h2_limit_threshold(samples: SampleSet, cfg: SinkhornConfig, per_sample_mean: bool = True) -> float:
    """Radius above which large ``eps`` reproduces the H2 design.

    ``Tr Sigma + (1/N) sum |xi_i|^2``; ``per_sample_mean=False`` drops the
    ``1/N`` and returns the plain sum.
    """
    s = float(np.sum(samples.samples ** 2))
    return float(np.trace(cfg.Sigma)) + (s / samples.N if per_sample_mean else s)


@dataclass(frozen=True)
class RadiusStats:
    """Moments and light-tail constants of the data-generating law."""

    mu_star: np.ndarray
    Sigma_star: np.ndarray
    b: float
    a: float


@dataclass(frozen=True)
class ConcentrationConsts:
    c1: float
    c2: float


def radius_offset(N: int, cfg: SinkhornConfig, stats: RadiusStats) -> float:
    """The entropic offset ``m`` added (times ``eps``) to the Wasserstein radius."""
    n = cfg.n_xi
    mu = np.asarray(stats.mu_star, dtype=float).reshape(n)
    Ss = np.atleast_2d(np.asarray(stats.Sigma_star, dtype=float))
    Sinv = np.linalg.inv(cfg.Sigma)
    _, ld_star = np.linalg.slogdet(Ss)
    _, ld = np.linalg.slogdet(cfg.Sigma)
    return float(
        np.log(N) + np.log(stats.b) + 0.5 * n * np.log(2 * np.pi) + 0.5 * ld_star
        + 0.5 * mu @ Sinv @ mu + 0.5 * ld + 0.5 * np.trace(Sinv @ Ss)
    )


def calibrate_radius(N: int, eta: float, cfg: SinkhornConfig, stats: RadiusStats,
                     consts: ConcentrationConsts, tail_exponent: str = "printed") -> float:
    """Finite-sample radius ``theta_N(eta)``.

    The light-tail branch is taken when ``log(c1/eta)/(c2 N) > 1``.  Its
    exponent is ``a`` (``tail_exponent="printed"``) or ``1/a``
    (``"reciprocal"``).  A nonpositive log ratio gives a zero concentration
    term.
    """
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if N < 1:
        raise ValueError(f"N must be positive, got {N}")
    if tail_exponent not in ("printed", "reciprocal"):
        raise ValueError("tail_exponent must be 'printed' or 'reciprocal'")
    ratio = max(np.log(consts.c1 / eta) / (consts.c2 * N), 0.0)
    if ratio <= 1.0:
        power = 1.0 / max(cfg.n_xi, 2)
    else:
        power = stats.a if tail_exponent == "printed" else 1.0 / stats.a
    conc = ratio ** power
    if cfg.epsilon == 0:
        return float(conc)
    return float(conc + cfg.epsilon * radius_offset(N, cfg, stats))
