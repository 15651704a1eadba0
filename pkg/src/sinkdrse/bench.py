"""Case-study system, disturbance sampler, Monte-Carlo scoring and sweeps.

Seeds are split with ``numpy.random.SeedSequence``: a sweep with root seed
``s`` designs on samples drawn from ``(s, 0)`` and scores every method on the
shared evaluation draws ``(s, 1)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .ambiguity import SampleSet, SinkhornConfig, feasibility_threshold
from .drse import (
    InfeasibleRadiusError,
    frank_wolfe_solve,
    solve_h2,
    solve_wasserstein,
)
from .sls import (
    ClosedLoopMaps,
    LtvSystem,
    ObserverGain,
    SingularMapError,
    SlsOperators,
    build_sls_operators,
    maps_from_gain,
    recover_gain,
    rollout_error,
)

log = logging.getLogger(__name__)

METHODS = ("h2", "wasserstein", "sinkhorn")

_BBT = np.array([[1.9608, 0.0195], [0.0195, 1.9605]])


def case_study_system(T: int = 10, t0: int = 0) -> LtvSystem:
    """Two-state tracking model with a drifting coupling term.

    ``w`` has three unit-variance channels: two drive the state through the
    Cholesky factor of the process covariance, the third is measurement noise.
    """
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    Bx = np.linalg.cholesky(_BBT)
    B = np.hstack([Bx, np.zeros((2, 1))])
    C = np.array([[1.0, -1.0]])
    D = np.array([[0.0, 0.0, 1.0]])
    A = tuple(np.array([[0.9802, 0.0196 + 0.099 * k], [0.0, 0.9802]]) for k in range(T))
    return LtvSystem(t0, T, A, (B,) * T, (C,) * T, (D,) * T)


def reference_sigma(sys: LtvSystem, e0_cov=None) -> np.ndarray:
    """``blockdiag(e0_cov, I)`` for the stacked ``xi = (e0, w_0, ..., w_{T-1})``."""
    nx = sys.nx
    E = np.eye(nx) if e0_cov is None else np.atleast_2d(np.asarray(e0_cov, dtype=float))
    if E.shape != (nx, nx):
        raise ValueError(f"e0_cov is {E.shape}, expected {(nx, nx)}")
    np.linalg.cholesky(E)
    S = np.eye(sys.n_xi)
    S[:nx, :nx] = E
    return S


@dataclass(frozen=True)
class DisturbanceModel:
    """Law of the stacked ``xi``.

    ``laplace_uniform_mixture``: with probability ``weight`` the whole vector
    is Laplace with per-coordinate variance ``laplace_var``, otherwise uniform
    on ``[-half_width, half_width]``.  ``gaussian`` uses covariance ``cov``
    (identity if omitted, scaled by ``scale``).  ``custom_csv`` resamples the
    rows of ``path`` with replacement.
    """

    kind: str = "laplace_uniform_mixture"
    weight: float = 0.5
    laplace_var: float = 0.2
    half_width: float = 0.31
    scale: float = 1.0
    cov: list | None = None
    path: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("laplace_uniform_mixture", "gaussian", "custom_csv"):
            raise ValueError(f"unknown disturbance kind '{self.kind}'")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"weight must lie in [0, 1], got {self.weight}")
        if self.laplace_var <= 0 or self.half_width <= 0:
            raise ValueError("laplace_var and half_width must be positive")
        if self.scale < 0:
            raise ValueError("scale must be nonnegative")
        if self.kind == "custom_csv" and not self.path:
            raise ValueError("custom_csv needs a path")

    @classmethod
    def from_dict(cls, doc: dict) -> "DisturbanceModel":
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_disturbance(model: DisturbanceModel, n: int, n_xi: int, seed=None) -> SampleSet:
    """``n`` draws of ``xi``; ``seed`` overrides ``model.seed``."""
    rng = np.random.default_rng(model.seed if seed is None else seed)
    if model.kind == "laplace_uniform_mixture":
        lap = rng.laplace(0.0, math.sqrt(model.laplace_var / 2.0), (n, n_xi))
        uni = rng.uniform(-model.half_width, model.half_width, (n, n_xi))
        pick = rng.random((n, 1)) < model.weight
        return SampleSet(np.where(pick, lap, uni))
    if model.kind == "gaussian":
        cov = np.eye(n_xi) if model.cov is None else np.asarray(model.cov, dtype=float)
        if cov.shape != (n_xi, n_xi):
            raise ValueError(f"cov is {cov.shape}, expected {(n_xi, n_xi)}")
        L = np.linalg.cholesky(cov) if model.scale > 0 else np.zeros_like(cov)
        return SampleSet(model.scale * rng.standard_normal((n, n_xi)) @ L.T)
    pool = SampleSet.from_csv(model.path).samples
    if pool.shape[1] != n_xi:
        raise ValueError(f"{model.path} holds vectors of length {pool.shape[1]}, expected {n_xi}")
    return SampleSet(pool[rng.integers(0, pool.shape[0], size=n)])


def squared_errors(maps_or_gain, ops: SlsOperators, xi) -> np.ndarray:
    """``||Phi Q xi||^2`` for each row of ``xi``."""
    xi = xi.samples if isinstance(xi, SampleSet) else np.atleast_2d(xi)
    e = rollout_error(maps_or_gain, ops, xi)
    return np.sum(e * e, axis=1)


def monte_carlo_mse(gain, sys: LtvSystem, model: DisturbanceModel, runs: int = 20000, seed=None,
                    ops: SlsOperators | None = None) -> tuple[float, float]:
    """Mean of ``||e||^2`` over ``runs`` draws and its standard error."""
    if runs < 1:
        raise ValueError("runs must be positive")
    ops = build_sls_operators(sys) if ops is None else ops
    xi = sample_disturbance(model, runs, ops.n_xi, seed)
    sq = squared_errors(gain, ops, xi)
    se = float(np.std(sq, ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0
    return float(np.mean(sq)), se


@dataclass
class Design:
    method: str
    theta: float
    epsilon: float
    maps: ClosedLoopMaps
    value: float
    gain: ObserverGain | None
    lam: float | None = None
    trace: object = None
    status: str = "optimal"
    wall_time_s: float = 0.0


def design(method: str, ops: SlsOperators, samples: SampleSet, theta: float = 0.0, epsilon: float = 0.0,
           Sigma=None, *, sys=None, kappa=None, tol_gap: float = 1e-5, max_iter: int = 500,
           init: str = "wasserstein") -> Design:
    """Run one design.  The H2 value is the Gaussian objective ``||Phi Q Sigma^{1/2}||_F^2``."""
    Sigma = np.eye(ops.n_xi) if Sigma is None else np.asarray(Sigma, dtype=float)
    t = time.perf_counter()
    trace, lam, status = None, None, "optimal"
    if method == "h2":
        maps, value = solve_h2(ops, Sigma)
    elif method == "wasserstein":
        maps, it, value = solve_wasserstein(ops, samples, theta, kappa=1e-6 if kappa is None else kappa)
        lam = it.lam
    elif method == "sinkhorn":
        cfg = SinkhornConfig(epsilon, theta, Sigma, kappa)
        res = frank_wolfe_solve(ops, samples, cfg, init_strategy=init, tol_gap=tol_gap,
                                max_iter=max_iter, sys=sys)
        maps, value, lam, trace, status = res.maps, res.value, res.iterate.lam, res.trace, res.status
    else:
        raise ValueError(f"unknown method '{method}'")
    try:
        gain = recover_gain(maps)
    except SingularMapError:
        gain = None
    return Design(method, theta, epsilon, maps, float(value), gain, lam, trace, status,
                  time.perf_counter() - t)


@dataclass
class ExperimentResult:
    method: str
    theta: float
    epsilon: float
    design_value: float
    mse_mean: float
    mse_stderr: float
    feasible: bool
    wall_time_s: float
    N: int
    status: str = "optimal"
    trace: object = field(default=None, repr=False)

    COLUMNS = ("method", "theta", "epsilon", "design_value", "mse_mean", "mse_stderr",
               "feasible", "wall_time_s")

    def row(self) -> dict:
        return {c: getattr(self, c) for c in self.COLUMNS}


@dataclass
class SweepConfig:
    """Grid and data settings of a sweep.  ``e0_cov=None`` means identity."""

    thetas: list
    epsilons: list = field(default_factory=lambda: [1e-3])
    methods: list = field(default_factory=lambda: list(METHODS))
    T: int = 10
    t0: int = 0
    N: int = 100
    seed: int = 0
    eval_runs: int = 20000
    disturbance: DisturbanceModel = field(default_factory=DisturbanceModel)
    e0_cov: list | None = None
    kappa: float | None = None
    tol_gap: float = 1e-5
    max_iter: int = 500
    init: str = "wasserstein"
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.disturbance, dict):
            self.disturbance = DisturbanceModel.from_dict(self.disturbance)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")

    @classmethod
    def from_json(cls, path) -> "SweepConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


def _cells(cfg: SweepConfig):
    """``(method, theta, eps)`` cells; H2 once, Wasserstein once per ``theta``."""
    cells = []
    if "h2" in cfg.methods:
        cells.append(("h2", math.nan, math.nan))
    for th in cfg.thetas:
        if "wasserstein" in cfg.methods:
            cells.append(("wasserstein", float(th), 0.0))
        if "sinkhorn" in cfg.methods:
            cells.extend(("sinkhorn", float(th), float(e)) for e in cfg.epsilons)
    return cells


def _run_cell(args):
    cfg, sys, ops, samples, Sigma, xi_eval, cell = args
    method, th, eps = cell
    if method == "sinkhorn" and th <= feasibility_threshold(samples, SinkhornConfig(eps, 1.0, Sigma)):
        return ExperimentResult(method, th, eps, math.nan, math.nan, math.nan, False, 0.0, samples.N,
                                "infeasible")
    try:
        d = design(method, ops, samples, th, eps, Sigma, sys=sys, kappa=cfg.kappa, tol_gap=cfg.tol_gap,
                   max_iter=cfg.max_iter, init=cfg.init)
    except (InfeasibleRadiusError, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("cell %s theta=%s eps=%s failed: %s", method, th, eps, exc)
        return ExperimentResult(method, th, eps, math.nan, math.nan, math.nan, False, 0.0, samples.N,
                                "failed")
    sq = squared_errors(d.maps, ops, xi_eval)
    se = float(np.std(sq, ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0
    return ExperimentResult(method, th, eps, d.value, float(np.mean(sq)), se, True, d.wall_time_s,
                            samples.N, d.status, d.trace)


def sweep_data(cfg: SweepConfig):
    """System, operators, design samples, reference covariance and evaluation draws."""
    sys = case_study_system(cfg.T, cfg.t0)
    ops = build_sls_operators(sys)
    samples = sample_disturbance(cfg.disturbance, cfg.N, ops.n_xi, seed=[cfg.seed, 0])
    xi_eval = sample_disturbance(cfg.disturbance, cfg.eval_runs, ops.n_xi, seed=[cfg.seed, 1])
    Sigma = reference_sigma(sys, cfg.e0_cov)
    return sys, ops, samples, Sigma, xi_eval


def run_sweep(cfg: SweepConfig) -> list[ExperimentResult]:
    """Every cell of the grid, scored on one shared evaluation sample.

    Cells with ``theta <= theta_0(eps)`` are recorded as infeasible; failing
    cells are recorded and the sweep continues.
    """
    sys, ops, samples, Sigma, xi_eval = sweep_data(cfg)
    jobs = [(cfg, sys, ops, samples, Sigma, xi_eval, c) for c in _cells(cfg)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            return list(ex.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def write_results(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ExperimentResult.COLUMNS)
        w.writeheader()
        for r in results:
            w.writerow(r.row())


