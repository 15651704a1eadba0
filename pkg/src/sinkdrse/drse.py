"""Estimator designs: H2, Wasserstein DRSE and Sinkhorn DRSE.

The Sinkhorn design minimises, over achievable ``Phi`` and dual variables
``(P, lam, q)``,

    J = lam*theta - (lam*eps/2) logdet Sigma + (lam*eps*n/2) log(lam*eps/2)
        - (lam*eps/2) logdet(lam*Omega - P) + mean(q)

subject to ``P >= Q'Phi'Phi Q``, ``lam*Omega - P >= kappa I`` and one LMI per
sample, ``[[lam*Omega - P, lam*xi], [lam*xi', q + lam*|xi|^2]] >= 0``.
``frank_wolfe_solve`` runs the conditional-gradient scheme over that set;
``solve_sinkhorn_direct`` minimises the same objective with a barrier method
and serves as a cross-check.

Because ``J`` increases in ``P`` and in ``q``, every linear subproblem with a
positive definite ``P`` coefficient is attained at ``P = Y'Y`` (``Y = Phi Q``)
with each sample LMI active.  The default ("reduced") oracle exploits this and
optimises over the affine coordinates of ``Phi`` and ``lam`` only.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .ambiguity import SampleSet, SinkhornConfig, feasibility_threshold, omega
from .conic import (
    LMI,
    ConicProgram,
    ConicSolveError,
    Equality,
    NotPositiveDefiniteError,
    Term,
    cholesky,
    min_frobenius_recovery,
    solve_linear_sdp,
)
from .reduced import AchievableSpace, ReducedProblem, barrier_solve, interior_lambda
from .sls import (
    ClosedLoopMaps,
    ObserverGain,
    SingularMapError,
    SlsOperators,
    maps_from_gain,
    recover_gain,
)

log = logging.getLogger(__name__)

LMO_REL_TOL = 1e-9


class InfeasibleRadiusError(ValueError):
    """The radius does not exceed the nonemptiness threshold ``theta_0``."""


@dataclass(frozen=True)
class DualIterate:
    P: np.ndarray
    lam: float
    q: np.ndarray

    def scaled(self, t: float) -> "DualIterate":
        return DualIterate(t * self.P, t * self.lam, t * self.q)


@dataclass(frozen=True)
class IterateBounds:
    """Box and interval bounds defining the compact Frank-Wolfe domain."""

    P_lo: np.ndarray
    P_hi: np.ndarray
    lambda_lo: float
    lambda_hi: float
    q_lo: np.ndarray
    q_hi: np.ndarray
    lower_rule: str = "fixed_rows"

    def margins(self, it: DualIterate) -> dict:
        """Signed slack of ``it`` against each bound; negative means outside."""
        return {
            "P_lo": float(np.linalg.eigvalsh(it.P - self.P_lo)[0]),
            "P_hi": float(np.linalg.eigvalsh(self.P_hi - it.P)[0]),
            "lambda_lo": float(it.lam - self.lambda_lo),
            "lambda_hi": float(self.lambda_hi - it.lam),
            "q_lo": float(np.min(it.q - self.q_lo)),
            "q_hi": float(np.min(self.q_hi - it.q)),
        }


@dataclass
class FwTrace:
    k: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    lower: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    step: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def append(self, k, upper, lower, step, wall):
        self.k.append(int(k))
        self.upper.append(float(upper))
        self.lower.append(float(lower))
        self.gap.append(abs(float(upper) - float(lower)))
        self.step.append(float(step))
        self.wall_time.append(float(wall))

    def __len__(self):
        return len(self.k)

    def best_gap(self) -> np.ndarray:
        """``J^(k) - max_{j<=k} lower^(j)``."""
        return np.asarray(self.upper) - np.maximum.accumulate(np.asarray(self.lower))

    def to_dict(self) -> dict:
        return {"k": self.k, "upper": self.upper, "lower": self.lower, "gap": self.gap,
                "step": self.step, "wall_time": self.wall_time}


@dataclass
class LmoResult:
    direction: DualIterate
    maps: ClosedLoopMaps
    value: float          # certified lower bound on the subproblem optimum
    solver_gap: float
    z: np.ndarray | None = None


@dataclass
class FwResult:
    maps: ClosedLoopMaps
    iterate: DualIterate
    trace: FwTrace
    bounds: IterateBounds
    status: str              # converged | max_iterations
    value: float
    lower_bound: float
    gain: ObserverGain | None = None
    iterate_maps: ClosedLoopMaps | None = None   # convex combination of oracle maps
    recovery_status: str = "optimal"

    def __iter__(self):
        return iter((self.maps, self.iterate, self.trace))


# --------------------------------------------------------------------------
# shared helpers


def achievable_space(ops: SlsOperators) -> AchievableSpace:
    if "space" not in ops._cache:
        ops._cache["space"] = AchievableSpace(ops)
    return ops._cache["space"]


def _as_samples(samples) -> SampleSet:
    return samples if isinstance(samples, SampleSet) else SampleSet(samples)


def _check_dims(ops: SlsOperators, samples: SampleSet, cfg: SinkhornConfig | None = None):
    if samples.n_xi != ops.n_xi:
        raise ValueError(f"samples have length {samples.n_xi}, expected n_xi={ops.n_xi}")
    if cfg is not None and cfg.n_xi != ops.n_xi:
        raise ValueError(f"Sigma is {cfg.n_xi}x{cfg.n_xi}, expected n_xi={ops.n_xi}")


def _chol_M(P, lam, cfg):
    M = lam * omega(cfg) - P
    return cholesky(0.5 * (M + M.T))


def _entropic_logdet(P, lam, cfg: SinkhornConfig) -> float:
    """``logdet Sigma - n log(lam eps/2) + logdet(lam Omega - P)``.

    Equals ``logdet(I + (2/eps)(Sigma - Sigma^{1/2} P Sigma^{1/2}/lam))``, summed
    as ``log1p`` of eigenvalues so large ``eps`` does not cancel.
    """
    eps = cfg.epsilon
    Sh = cfg.Sigma_sqrt
    E = (2.0 / eps) * (cfg.Sigma - Sh @ P @ Sh / lam)
    e = np.linalg.eigvalsh(0.5 * (E + E.T))
    if e[0] <= -1.0:
        raise NotPositiveDefiniteError("lam*Omega - P is not positive definite")
    return float(np.sum(np.log1p(e)))


def eliminate_q(P, lam, samples, cfg: SinkhornConfig) -> np.ndarray:
    """Smallest ``q`` meeting each sample LMI: ``lam^2 xi'(lam Omega - P)^{-1} xi - lam |xi|^2``."""
    samples = _as_samples(samples)
    X = samples.samples
    c = _chol_M(P, lam, cfg)
    sol = sla.cho_solve((c, True), X.T)
    return lam ** 2 * np.sum(X.T * sol, axis=0) - lam * np.sum(X ** 2, axis=1)


def dual_objective(it: DualIterate, samples, cfg: SinkhornConfig) -> float:
    _chol_M(it.P, it.lam, cfg)  # raises when lam*Omega - P is not positive definite
    J = it.lam * cfg.theta + float(np.mean(it.q))
    if cfg.epsilon > 0 and it.lam > 0:
        J -= 0.5 * it.lam * cfg.epsilon * _entropic_logdet(it.P, it.lam, cfg)
    return float(J)


def reduced_objective(P, lam, samples, cfg) -> float:
    """``J`` with ``q`` eliminated."""
    q = eliminate_q(P, lam, samples, cfg)
    return dual_objective(DualIterate(P, lam, q), samples, cfg)


def gradients(P, lam, samples, cfg: SinkhornConfig):
    """Partial gradients of ``J`` with respect to ``P``, ``lam`` and ``q``.

    ``grad_lam = theta - (eps/2) logdet(...) - (eps/2) Tr((lam Omega - P)^{-1} P)``
    is the derivative of the log-det terms regrouped without cancelling
    parts.  ``grad_q`` is ``1/N`` per entry since ``q`` enters as a mean.
    """
    samples = _as_samples(samples)
    n, eps = cfg.n_xi, cfg.epsilon
    gq = np.full(samples.N, 1.0 / samples.N)
    c = _chol_M(P, lam, cfg)
    if eps == 0:
        return np.zeros((n, n)), float(cfg.theta), gq
    Minv = sla.cho_solve((c, True), np.eye(n))
    Minv = 0.5 * (Minv + Minv.T)
    gP = 0.5 * lam * eps * Minv
    gl = cfg.theta - 0.5 * eps * _entropic_logdet(P, lam, cfg) - 0.5 * eps * float(np.sum(Minv * P))
    return gP, float(gl), gq


def lift_lambda(P, cfg: SinkhornConfig) -> float:
    """``||Omega^{-1} P + kappa Omega^{-1}||_2``: a ``lam`` with ``lam Omega - P >= kappa I``."""
    Oi = np.linalg.inv(omega(cfg))
    return float(np.linalg.norm(Oi @ P + cfg.kappa_value * Oi, 2))


# --------------------------------------------------------------------------
# H2


def solve_h2(ops: SlsOperators, Sigma) -> tuple[ClosedLoopMaps, float]:
    """Minimum ``||Phi Q Sigma^{1/2}||_F^2`` over achievable, pattern-respecting maps.

    Rows of one block row share their admissible columns, so each block row
    is one equality-constrained least-squares problem solved via its KKT
    system.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.shape != (ops.n_xi, ops.n_xi):
        raise ValueError(f"Sigma is {Sigma.shape}, expected n_xi={ops.n_xi}")
    nx, nr = ops.nx, ops.n_rows
    Q, R = np.asarray(ops.Q), np.asarray(ops.R)
    H = Q @ Sigma @ Q.T
    Phi = np.zeros((nr, ops.n_cols))
    for r in range(ops.T + 1):
        F = np.flatnonzero(ops.pattern[r * nx])
        E = np.zeros((nr, nx))
        E[r * nx + np.arange(nx), np.arange(nx)] = 1.0
        # R_F' phi = e, reduced to a full-row-rank system V' phi = s^{-1} U' e
        U, sv, Vt = np.linalg.svd(R[F, :].T, full_matrices=False)
        rank = int(np.sum(sv > 1e-12 * sv[0]))
        U, sv, Vt = U[:, :rank], sv[:rank], Vt[:rank]
        if np.linalg.norm(E - U @ (U.T @ E)) > 1e-10:
            raise SingularMapError(f"block row {r} cannot satisfy Phi R = I within the pattern")
        m = len(F)
        K = np.zeros((m + rank, m + rank))
        K[:m, :m] = 2.0 * H[np.ix_(F, F)]
        K[:m, m:] = Vt.T
        K[m:, :m] = Vt
        rhs = np.zeros((m + rank, nx))
        rhs[m:] = (U.T @ E) / sv[:, None]
        try:
            sol = sla.solve(K, rhs, assume_a="sym")
        except np.linalg.LinAlgError as exc:
            raise SingularMapError(f"KKT system of block row {r} is singular") from exc
        if np.linalg.norm(K @ sol - rhs) > 1e-8 * max(1.0, np.linalg.norm(sol)):
            raise SingularMapError(f"KKT system of block row {r} is rank deficient")
        Phi[r * nx:(r + 1) * nx, F] = sol[:m].T
    maps = ClosedLoopMaps.from_stacked(Phi, ops)
    PQ = maps.Phi @ Q
    return maps, float(np.sum(PQ * (PQ @ Sigma)))


# --------------------------------------------------------------------------
# conic form of the dual program


def build_dual_program(ops: SlsOperators, samples: SampleSet, Om, kappa: float, lam_coef: float,
                       G=None, bounds: IterateBounds | None = None) -> ConicProgram:
    """Linear conic program over ``(Phi, P, lam, q)``.

    Objective ``<G, P> + lam_coef*lam + mean(q)``; one LMI per sample.  With
    ``bounds`` the interval and box constraints of the compact domain are
    added.
    """
    n, nr, N = ops.n_xi, ops.n_rows, samples.N
    prog = ConicProgram()
    prog.free_matrix_vars["Phi"] = ((nr, ops.n_cols), ops.pattern)
    if bounds is None:
        prog.matrix_vars["P"] = (n, None, None)
        prog.scalar_vars["lam"] = (0.0, None)
    else:
        prog.matrix_vars["P"] = (n, bounds.P_lo, bounds.P_hi)
        prog.scalar_vars["lam"] = (float(bounds.lambda_lo), float(bounds.lambda_hi))
    prog.objective["lam"] = float(lam_coef)
    if G is not None:
        prog.objective["P"] = np.asarray(G, dtype=float)
    I = np.eye(n)
    top = np.vstack([I, np.zeros((nr, n))])
    bot = np.vstack([np.zeros((n, nr)), np.eye(nr)])
    const = np.zeros((n + nr, n + nr))
    const[n:, n:] = np.eye(nr)
    prog.lmis.append(LMI(const, [
        Term("P", top, top.T),
        Term("Phi", bot, ops.Q @ top.T),
        Term("Phi", top @ ops.Q.T, bot.T, transpose=True),
    ], "schur"))
    prog.lmis.append(LMI(-kappa * I, [Term("lam", Om, I), Term("P", -I, I)], "margin"))
    e_last = np.zeros((n + 1, 1))
    e_last[n, 0] = 1.0
    Emb = np.vstack([I, np.zeros((1, n))])
    for i, xi in enumerate(samples.samples):
        Lm = np.zeros((n + 1, n + 1))
        Lm[:n, :n] = Om
        Lm[:n, n] = xi
        Lm[n, :n] = xi
        Lm[n, n] = xi @ xi
        name = f"q{i}"
        if bounds is None:
            prog.scalar_vars[name] = (None, None)
        else:
            prog.scalar_vars[name] = (float(bounds.q_lo[i]), float(bounds.q_hi[i]))
        prog.objective[name] = 1.0 / N
        prog.lmis.append(LMI(np.zeros((n + 1, n + 1)), [
            Term("lam", Lm, np.eye(n + 1)),
            Term("P", -Emb, Emb.T),
            Term(name, e_last, e_last.T),
        ], f"sample{i}"))
    prog.equalities.append(Equality([Term("Phi", np.eye(nr), ops.R)], np.eye(nr), "achievability"))
    return prog


# --------------------------------------------------------------------------
# Wasserstein


def solve_wasserstein(ops: SlsOperators, samples, theta: float, kappa: float = 1e-6,
                      backend: str = "reduced"):
    """Wasserstein DRSE design, the ``eps = 0`` program.

    Returns ``(maps, DualIterate, value)``.  ``backend="sdp"`` solves the
    literal conic program (one LMI per sample) through cvxpy and suits small
    instances only.
    """
    samples = _as_samples(samples)
    _check_dims(ops, samples)
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    cfg = SinkhornConfig(0.0, theta, np.eye(ops.n_xi), kappa)
    if backend == "sdp":
        sol = solve_linear_sdp(build_dual_program(ops, samples, np.eye(ops.n_xi), kappa, theta))
        if sol.status != "optimal":
            raise ConicSolveError(f"Wasserstein SDP ended with status {sol.status}", sol)
        maps = ClosedLoopMaps.from_stacked(sol.values["Phi"], ops)
        P = sol.values["P"]
        lam = sol.values["lam"]
        q = np.array([sol.values[f"q{i}"] for i in range(samples.N)])
        return maps, DualIterate(P, lam, q), float(sol.objective)
    if backend != "reduced":
        raise ValueError(f"unknown backend '{backend}'")
    space = achievable_space(ops)
    Sbar = samples.second_moment()
    prob = ReducedProblem(space, np.eye(ops.n_xi), Sbar, theta - np.trace(Sbar), kappa=kappa)
    z0 = np.zeros(space.dim)
    res = barrier_solve(prob, z0, interior_lambda(prob, z0), rel_tol=LMO_REL_TOL)
    if res.status != "optimal":
        log.warning("Wasserstein barrier solve stopped early (gap %.3e)", res.gap)
    maps = ClosedLoopMaps.from_stacked(space.Phi(res.z), ops)
    Y = space.Y(res.z)
    P = Y.T @ Y
    q = eliminate_q(P, res.lam, samples, cfg)
    return maps, DualIterate(P, res.lam, q), float(res.value)


# --------------------------------------------------------------------------
# Sinkhorn: direct barrier solve


def _sinkhorn_lin(samples: SampleSet, cfg: SinkhornConfig) -> float:
    eps, n = cfg.epsilon, cfg.n_xi
    c = cfg.theta - float(np.trace(samples.second_moment()))
    if eps > 0:
        _, ld = np.linalg.slogdet(cfg.Sigma)
        c += -0.5 * eps * ld + 0.5 * eps * n * np.log(0.5 * eps)
    return c


def solve_sinkhorn_direct(ops: SlsOperators, samples, cfg: SinkhornConfig, rel_tol: float = 1e-10):
    """Minimise ``J`` jointly over ``(Phi, lam)`` with a barrier method.

    Returns ``(maps, DualIterate, value, certified_gap)``.  The log-det terms
    are combined in raw form, so accuracy degrades once ``eps`` is large
    (say above ``1e3``); the Frank-Wolfe path has no such limitation.
    """
    samples = _as_samples(samples)
    _check_dims(ops, samples, cfg)
    th0 = feasibility_threshold(samples, cfg)
    if cfg.theta <= th0:
        raise InfeasibleRadiusError(f"theta={cfg.theta} must exceed theta_0={th0:.6g}")
    space = achievable_space(ops)
    prob = ReducedProblem(space, omega(cfg), samples.second_moment(), _sinkhorn_lin(samples, cfg),
                          ent=0.5 * cfg.epsilon, kappa=cfg.kappa_value)
    z0 = np.zeros(space.dim)
    res = barrier_solve(prob, z0, interior_lambda(prob, z0), rel_tol=rel_tol)
    maps = ClosedLoopMaps.from_stacked(space.Phi(res.z), ops)
    Y = space.Y(res.z)
    P = Y.T @ Y
    it = DualIterate(P, res.lam, eliminate_q(P, res.lam, samples, cfg))
    return maps, it, dual_objective(it, samples, cfg), res.gap


# --------------------------------------------------------------------------
# Frank-Wolfe ingredients


def pole_placement_gain(ops: SlsOperators, sys, poles=None) -> ObserverGain:
    """Gain with only ``L_{t|t}`` nonzero, placing the spectrum of ``A_t - L_{t|t} C_t``.

    Default poles are real with modulus at most 0.5: ``0.5, -0.5`` for two
    states, ``0.5 * linspace(1, -1, n_x)`` in general (single-output pairs
    need distinct poles).
    """
    from scipy.signal import place_poles

    nx = ops.nx
    if poles is None:
        poles = [0.5] if nx == 1 else list(0.5 * np.linspace(1.0, -1.0, nx))
    poles = np.asarray(poles, dtype=float)
    blocks = {}
    for k in range(ops.T):
        A, C = sys.A[k], sys.C[k]
        if nx == 1 and C.shape[0] == 1:
            if abs(C[0, 0]) < 1e-14:
                raise ValueError(f"(A, C) is not observable at t={sys.t0 + k}")
            L = np.array([[(A[0, 0] - poles[0]) / C[0, 0]]])
        else:
            obs = np.vstack([C @ np.linalg.matrix_power(A, j) for j in range(nx)])
            if np.linalg.matrix_rank(obs) < nx:
                raise ValueError(f"(A, C) is not observable at t={sys.t0 + k}")
            L = place_poles(A.T, C.T, poles).gain_matrix.T
        blocks[(sys.t0 + k, sys.t0 + k)] = L
    return ObserverGain.from_blocks(blocks, ops)


def best_lambda(P, samples, cfg: SinkhornConfig, lam_min: float) -> float:
    """Minimiser of the convex map ``lam -> J(P, lam, q(P, lam))`` over ``lam >= lam_min``."""
    from scipy.optimize import minimize_scalar

    def f(s):
        return reduced_objective(P, lam_min * np.exp(s), samples, cfg)

    # bracket the minimiser on a log scale
    hi = 1.0
    while f(hi) < f(hi / 2) and hi < 60:
        hi *= 2
    res = minimize_scalar(f, bounds=(0.0, hi), method="bounded", options={"xatol": 1e-10})
    s = res.x if res.fun < f(0.0) else 0.0
    return float(lam_min * np.exp(s))


def initialize(strategy: str, ops: SlsOperators, samples, cfg: SinkhornConfig, sys=None, poles=None,
               lift: str = "optimal"):
    """Feasible starting iterate ``(DualIterate, maps)``.

    ``"wasserstein"`` solves the ``eps = 0`` design at the same radius;
    ``"pole_placement"`` (alias ``"pole"``) needs ``sys``.  Either way
    ``P = Q'Phi'Phi Q`` and ``q`` is eliminated.  ``lift="boundary"`` takes
    ``lam = ||Omega^{-1}(P + kappa I)||_2``, which sits on the margin
    ``lam Omega - P = kappa I``; ``lift="optimal"`` (default) then moves
    ``lam`` up to the minimiser of ``J`` along ``lam``.
    """
    samples = _as_samples(samples)
    if strategy == "wasserstein":
        maps, _, _ = solve_wasserstein(ops, samples, cfg.theta, kappa=cfg.kappa_value)
    elif strategy in ("pole_placement", "pole"):
        if sys is None:
            raise ValueError("pole placement needs the system matrices (sys=...)")
        maps = maps_from_gain(pole_placement_gain(ops, sys, poles), ops)
    else:
        raise ValueError(f"unknown initialization strategy '{strategy}'")
    P = ops.quad(maps.Phi)
    lam = lift_lambda(P, cfg)
    if lift == "optimal":
        lam = best_lambda(P, samples, cfg, lam)
    elif lift != "boundary":
        raise ValueError(f"unknown lift '{lift}'")
    q = eliminate_q(P, lam, samples, cfg)
    return DualIterate(P, lam, q), maps


def pinv_gram(ops: SlsOperators) -> np.ndarray:
    """``Q' (R^+)' R^+ Q``, the loss matrix of the pseudo-inverse map."""
    Y = ops.R_pinv @ ops.Q
    return Y.T @ Y


def compute_bounds(feasible: DualIterate, ops: SlsOperators, samples, cfg: SinkhornConfig,
                   lower: str = "fixed_rows") -> IterateBounds:
    """Bounds on the optimal ``(P, lam, q)`` from a feasible point.

    ``lambda_hi = J(feasible)/(theta - theta_0)``.  ``lower`` selects the
    lower bound on ``P``: ``"fixed_rows"`` is the Gram matrix of the rows of
    ``Phi Q`` common to every achievable map (always valid); ``"pinv"`` is
    ``Q'(R^+)'R^+ Q``, which need not lie below ``Q'Phi'Phi Q``.
    """
    samples = _as_samples(samples)
    th0 = feasibility_threshold(samples, cfg)
    if cfg.theta <= th0:
        raise InfeasibleRadiusError(f"theta={cfg.theta} must exceed theta_0={th0:.6g}")
    J0 = reduced_objective(feasible.P, feasible.lam, samples, cfg)
    lam_hi = J0 / (cfg.theta - th0)
    if lower == "fixed_rows":
        P_lo = achievable_space(ops).fixed_row_gram()
    elif lower == "pinv":
        P_lo = pinv_gram(ops)
    else:
        raise ValueError(f"unknown lower-bound rule '{lower}'")
    Om = omega(cfg)
    kappa = cfg.kappa_value
    n = cfg.n_xi
    P_hi = lam_hi * Om + kappa * np.eye(n)
    lam_lo = lift_lambda(P_lo, cfg)
    X = samples.samples
    sq = np.sum(X ** 2, axis=1)
    c = cholesky(lam_hi * Om - P_lo)
    quad = np.sum(X.T * sla.cho_solve((c, True), X.T), axis=0)
    q_lo = lam_lo ** 2 * quad - lam_hi * sq
    q_hi = lam_hi ** 2 * sq / kappa - lam_lo * sq
    return IterateBounds(P_lo, P_hi, lam_lo, lam_hi, q_lo, q_hi, lower)


def curvature_bound(bounds: IterateBounds, cfg: SinkhornConfig) -> float:
    """Upper bound on the Frank-Wolfe curvature constant over the bounded domain."""
    kappa = cfg.kappa_value
    if not kappa > 0 or not bounds.lambda_lo > 0:
        raise ValueError("curvature bound needs kappa > 0 and lambda_lo > 0")
    eps, n = cfg.epsilon, cfg.n_xi
    diam2 = (np.linalg.norm(bounds.P_hi - bounds.P_lo, "fro") ** 2
             + (bounds.lambda_hi - bounds.lambda_lo) ** 2
             + np.linalg.norm(bounds.q_hi - bounds.q_lo) ** 2)
    Om2 = np.linalg.norm(omega(cfg), 2)
    lip = ((bounds.lambda_hi * eps + 2 * eps * np.linalg.norm(bounds.P_hi, "fro") + 2 * Om2 ** 2)
           / (2 * kappa ** 2) + n * eps / (2 * bounds.lambda_lo))
    return float(diam2 * lip)


def lmo_direction(grads, bounds: IterateBounds, ops: SlsOperators, samples, cfg: SinkhornConfig,
                  backend: str = "reduced", start=None, rel_tol: float = LMO_REL_TOL) -> LmoResult:
    """Minimise the linearised objective over the bounded domain.

    ``backend="reduced"`` restricts to ``P = Y'Y`` with active sample LMIs,
    where the remaining bounds are implied when ``bounds`` uses the
    ``"fixed_rows"`` rule; only ``lam <= lambda_hi`` is imposed.  ``start`` is
    a strictly feasible ``(z, lam)`` in map coordinates.  ``backend="sdp"``
    solves the full conic program with every bound explicit.
    """
    samples = _as_samples(samples)
    gP, gl, gq = grads
    if not np.allclose(gq, 1.0 / samples.N):
        raise ValueError("grad_q must equal 1/N per entry")
    Om = omega(cfg)
    kappa = cfg.kappa_value
    if backend == "sdp":
        prog = build_dual_program(ops, samples, Om, kappa, gl, gP, bounds)
        sol = solve_linear_sdp(prog)
        if sol.status != "optimal":
            raise ConicSolveError(f"direction-finding SDP ended with status {sol.status}", sol)
        q = np.array([sol.values[f"q{i}"] for i in range(samples.N)])
        d = DualIterate(0.5 * (sol.values["P"] + sol.values["P"].T), sol.values["lam"], q)
        maps = ClosedLoopMaps.from_stacked(sol.values["Phi"], ops)
        val = float(np.sum(gP * d.P) + gl * d.lam + gq @ q)
        return LmoResult(d, maps, val, abs(sol.gap) * max(1.0, abs(val)) if np.isfinite(sol.gap) else 0.0)
    if backend != "reduced":
        raise ValueError(f"unknown backend '{backend}'")
    if bounds.lower_rule != "fixed_rows":
        raise ValueError("the reduced oracle needs bounds built with lower='fixed_rows'")
    space = achievable_space(ops)
    Sbar = samples.second_moment()
    prob = ReducedProblem(space, Om, Sbar, gl - float(np.trace(Sbar)),
                          G=gP if np.any(gP) else None, kappa=kappa, lam_cap=bounds.lambda_hi)
    if start is None:
        z0 = np.zeros(space.dim)
        lam_min = interior_lambda(prob, z0, margin=0.0)
        start = (z0, 0.5 * (lam_min + bounds.lambda_hi))
    z0, lam0 = start
    res = barrier_solve(prob, z0, lam0, rel_tol=rel_tol)
    if res.status != "optimal":
        log.warning("direction-finding solve stopped early (gap %.3e)", res.gap)
    Y = space.Y(res.z)
    P = Y.T @ Y
    q = eliminate_q(P, res.lam, samples, cfg)
    d = DualIterate(P, res.lam, q)
    maps = ClosedLoopMaps.from_stacked(space.Phi(res.z), ops)
    return LmoResult(d, maps, res.value - res.gap, res.gap, res.z)


def frank_wolfe_solve(ops: SlsOperators, samples, cfg: SinkhornConfig, init_strategy: str = "wasserstein",
                      tol_gap: float = 1e-5, max_iter: int = 500, *, sys=None, lower: str = "fixed_rows", lift: str = "optimal",
                      lmo_backend: str = "reduced", recovery: str = "sdp", callback=None) -> FwResult:
    """Frank-Wolfe on ``(P, lam, q)`` with step ``2/(k+2)``.

    Stops when ``|J^(k) - Jlow^(k)| <= tol_gap * |J^(k)|``.  ``q`` is
    re-eliminated after each step.  The final ``P`` is turned into a map by
    ``min_frobenius_recovery`` (``recovery="sdp"``) or, with
    ``recovery="iterate"``, the matching convex combination of oracle maps is
    returned instead.
    """
    samples = _as_samples(samples)
    _check_dims(ops, samples, cfg)
    th0 = feasibility_threshold(samples, cfg)
    if cfg.theta <= th0:
        raise InfeasibleRadiusError(
            f"theta={cfg.theta} must exceed the nonemptiness threshold theta_0={th0:.6g}")
    t_start = time.perf_counter()
    it0, maps0 = initialize(init_strategy, ops, samples, cfg, sys=sys, lift=lift)
    bounds = compute_bounds(it0, ops, samples, cfg, lower=lower)
    space = achievable_space(ops)
    P, lam = it0.P, it0.lam
    z = space.project(maps0.Phi) if lmo_backend == "reduced" else None
    Phi_comb = maps0.Phi.copy()
    start = None
    if lmo_backend == "reduced":
        prob = ReducedProblem(space, omega(cfg), samples.second_moment(), 0.0,
                              kappa=cfg.kappa_value, lam_cap=bounds.lambda_hi)
        lam_min = interior_lambda(prob, z, margin=0.0)
        if lam_min >= bounds.lambda_hi:
            raise RuntimeError("initial map admits no lam below lambda_hi")
        start = (z.copy(), 0.5 * (lam_min + bounds.lambda_hi))
    trace = FwTrace()
    status = "max_iterations"
    best_lower = -np.inf
    for k in range(max_iter):
        J = reduced_objective(P, lam, samples, cfg)
        grads = gradients(P, lam, samples, cfg)
        lmo = lmo_direction(grads, bounds, ops, samples, cfg, backend=lmo_backend, start=start)
        rho = 2.0 / (k + 2)
        trace.append(k, J, lmo.value, rho, time.perf_counter() - t_start)
        best_lower = max(best_lower, lmo.value)
        if callback is not None:
            callback(k, J, lmo.value)
        if abs(J - lmo.value) <= tol_gap * abs(J):
            status = "converged"
            break
        d = lmo.direction
        P = (1 - rho) * P + rho * d.P
        P = 0.5 * (P + P.T)
        lam = (1 - rho) * lam + rho * d.lam
        Phi_comb = (1 - rho) * Phi_comb + rho * lmo.maps.Phi
    q = eliminate_q(P, lam, samples, cfg)
    iterate = DualIterate(P, lam, q)
    value = dual_objective(iterate, samples, cfg)
    comb = ClosedLoopMaps.from_stacked(Phi_comb, ops)
    rec_status = "iterate"
    maps = comb
    if recovery == "sdp":
        try:
            maps, sol = min_frobenius_recovery(P, ops)
            rec_status = sol.status
        except ConicSolveError as exc:
            log.warning("map recovery failed (%s); returning the averaged oracle map", exc)
            rec_status = "failed"
    elif recovery != "iterate":
        raise ValueError(f"unknown recovery '{recovery}'")
    try:
        gain = recover_gain(maps)
    except SingularMapError:
        gain = None
    return FwResult(maps, iterate, trace, bounds, status, value, best_lower, gain, comb, rec_status)
