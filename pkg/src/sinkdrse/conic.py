"""Dense PSD helpers and a small linear-SDP modelling layer.

``ConicProgram`` is a plain description of a linear SDP (variables, a linear
objective, affine equalities and LMIs).  ``solve_linear_sdp`` hands it to an
interior-point solver through cvxpy; nothing in the description depends on
the backend, and ``ConicProgram.to_json`` dumps it for external checking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

DEFAULT_FEAS_TOL = 1e-8
DEFAULT_GAP_TOL = 1e-7


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, msg, pivot: int | None = None):
        super().__init__(msg)
        self.pivot = pivot


def cholesky(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotPositiveDefiniteError` with the pivot."""
    M = np.asarray(M, dtype=float)
    c, info = sla.lapack.dpotrf(M, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite (leading minor {info} fails)", pivot=info - 1
        )
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    return c


def logdet_psd(M: np.ndarray) -> float:
    """``log det M`` of a symmetric positive definite matrix via Cholesky."""
    c = cholesky(M)
    return float(2.0 * np.sum(np.log(np.diag(c))))


def spd_inverse(M: np.ndarray) -> np.ndarray:
    c = cholesky(M)
    inv = sla.cho_solve((c, True), np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


def min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


# --------------------------------------------------------------------------
# program description


@dataclass
class Term:
    """``left @ X @ right`` (``X.T`` if ``transpose``) for variable ``var``.

    For a scalar variable ``x`` the term is ``x * (left @ right)``.
    """

    var: str
    left: np.ndarray
    right: np.ndarray
    transpose: bool = False


@dataclass
class LMI:
    """Affine matrix expression ``const + sum(terms)`` required to be PSD."""

    const: np.ndarray
    terms: list = field(default_factory=list)
    name: str = ""

    @property
    def dim(self) -> int:
        return self.const.shape[0]


@dataclass
class Equality:
    """``sum(terms) == rhs``."""

    terms: list
    rhs: np.ndarray
    name: str = ""


@dataclass
class ConicProgram:
    scalar_vars: dict = field(default_factory=dict)     # name -> (lo, hi), None = open
    matrix_vars: dict = field(default_factory=dict)     # name -> (dim, lo, hi), lo/hi matrices or None
    free_matrix_vars: dict = field(default_factory=dict)  # name -> (shape, mask or None)
    objective: dict = field(default_factory=dict)       # name -> scalar or coefficient matrix
    lmis: list = field(default_factory=list)
    equalities: list = field(default_factory=list)

    def shape_of(self, name: str) -> tuple:
        if name in self.scalar_vars:
            return (1, 1)
        if name in self.matrix_vars:
            d = self.matrix_vars[name][0]
            return (d, d)
        if name in self.free_matrix_vars:
            return tuple(self.free_matrix_vars[name][0])
        raise KeyError(f"undeclared variable '{name}'")

    def validate(self):
        for name in self.objective:
            self.shape_of(name)
        for lmi in self.lmis:
            c = np.asarray(lmi.const)
            if c.shape != (c.shape[0], c.shape[0]) or not np.allclose(c, c.T):
                raise ValueError(f"LMI '{lmi.name}' constant is not square symmetric")
            for t in lmi.terms:
                self.shape_of(t.var)
        for eq in self.equalities:
            for t in eq.terms:
                self.shape_of(t.var)

    def evaluate(self, expr_terms, const, values: dict) -> np.ndarray:
        out = np.array(const, dtype=float, copy=True)
        for t in expr_terms:
            if t.var in self.scalar_vars:
                out = out + float(values[t.var]) * (t.left @ t.right)
                continue
            X = np.atleast_2d(values[t.var])
            out = out + t.left @ (X.T if t.transpose else X) @ t.right
        return out

    def residuals(self, values: dict) -> tuple[float, float]:
        """Most negative LMI eigenvalue (clipped at 0) and largest equality residual."""
        lmi_viol = 0.0
        for lmi in self._all_lmis():
            F = self.evaluate(lmi.terms, lmi.const, values)
            lmi_viol = max(lmi_viol, -min_eig(F))
        eq_res = 0.0
        for eq in self.equalities:
            F = self.evaluate(eq.terms, np.zeros_like(eq.rhs, dtype=float), values) - eq.rhs
            eq_res = max(eq_res, float(np.max(np.abs(F), initial=0.0)))
        for name, (shape, mask) in self.free_matrix_vars.items():
            if mask is not None:
                eq_res = max(eq_res, float(np.max(np.abs(values[name][~mask]), initial=0.0)))
        return max(lmi_viol, 0.0), eq_res

    def _all_lmis(self):
        """User LMIs plus the interval and box bounds written as LMIs."""
        out = list(self.lmis)
        for name, (d, lo, hi) in self.matrix_vars.items():
            I = np.eye(d)
            if lo is not None:
                out.append(LMI(-np.asarray(lo, float), [Term(name, I, I)], f"{name}>=lo"))
            if hi is not None:
                out.append(LMI(np.asarray(hi, float), [Term(name, -I, I)], f"{name}<=hi"))
        one = np.ones((1, 1))
        for name, (lo, hi) in self.scalar_vars.items():
            if lo is not None:
                out.append(LMI(-lo * one, [Term(name, one, one)], f"{name}>=lo"))
            if hi is not None:
                out.append(LMI(hi * one, [Term(name, -one, one)], f"{name}<=hi"))
        return out

    def to_json(self) -> str:
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()

        def terms(ts):
            return [
                {"var": t.var, "left": arr(t.left), "right": arr(t.right), "transpose": t.transpose}
                for t in ts
            ]

        doc = {
            "scalar_vars": {k: list(v) for k, v in self.scalar_vars.items()},
            "matrix_vars": {
                k: {"dim": d, "lo": arr(lo), "hi": arr(hi)} for k, (d, lo, hi) in self.matrix_vars.items()
            },
            "free_matrix_vars": {
                k: {"shape": list(s), "mask": None if m is None else np.asarray(m).astype(int).tolist()}
                for k, (s, m) in self.free_matrix_vars.items()
            },
            "objective": {k: (float(v) if np.isscalar(v) else arr(v)) for k, v in self.objective.items()},
            "lmis": [{"name": l.name, "const": arr(l.const), "terms": terms(l.terms)} for l in self.lmis],
            "equalities": [
                {"name": e.name, "rhs": arr(e.rhs), "terms": terms(e.terms)} for e in self.equalities
            ],
        }
        return json.dumps(doc)


@dataclass
class ConicSolution:
    values: dict
    objective: float
    status: str  # optimal | infeasible | unbounded | max_iterations
    gap: float
    lmi_violation: float = np.nan
    eq_residual: float = np.nan
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class ConicSolveError(RuntimeError):
    def __init__(self, msg, solution: ConicSolution | None = None):
        super().__init__(msg)
        self.solution = solution


# --------------------------------------------------------------------------
# backend


def _cvx_model(prog: ConicProgram):
    import cvxpy as cp

    cvars, cons = {}, []
    for name, (lo, hi) in prog.scalar_vars.items():
        v = cp.Variable(name=name)
        cvars[name] = v
        if lo is not None:
            cons.append(v >= lo)
        if hi is not None:
            cons.append(v <= hi)
    for name, (d, lo, hi) in prog.matrix_vars.items():
        v = cp.Variable((d, d), symmetric=True, name=name)
        cvars[name] = v
        if lo is not None:
            cons.append(v - lo >> 0)
        if hi is not None:
            cons.append(hi - v >> 0)
    for name, (shape, mask) in prog.free_matrix_vars.items():
        if mask is None:
            cvars[name] = cp.Variable(shape, name=name)
            continue
        # only the admissible entries become decision variables
        import scipy.sparse as sp

        idx = np.flatnonzero(np.asarray(mask, dtype=bool).ravel())
        z = cp.Variable(len(idx), name=name)
        E = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(shape[0] * shape[1], len(idx)))
        cvars[name] = cp.reshape(E @ z, shape, order="C")

    def expr(terms, const):
        out = const
        for t in terms:
            X = cvars[t.var]
            if t.var in prog.scalar_vars:
                out = out + X * (t.left @ t.right)
                continue
            out = out + t.left @ (X.T if t.transpose else X) @ t.right
        return out

    for lmi in prog.lmis:
        F = expr(lmi.terms, lmi.const)
        cons.append(0.5 * (F + F.T) >> 0)
    for eq in prog.equalities:
        cons.append(expr(eq.terms, np.zeros_like(eq.rhs, dtype=float)) == eq.rhs)
    obj = 0
    for name, c in prog.objective.items():
        v = cvars[name]
        obj = obj + (c * v if np.isscalar(c) else cp.sum(cp.multiply(np.asarray(c, float), v)))
    return cp, cvars, cp.Problem(cp.Minimize(obj), cons)


_STATUS = {
    "optimal": "optimal",
    "optimal_inaccurate": "max_iterations",
    "infeasible": "infeasible",
    "infeasible_inaccurate": "infeasible",
    "unbounded": "unbounded",
    "unbounded_inaccurate": "unbounded",
    "user_limit": "max_iterations",
}


def solve_linear_sdp(prog: ConicProgram, tol: float = DEFAULT_FEAS_TOL, gap_tol: float = DEFAULT_GAP_TOL,
                     solver: str = "CLARABEL", max_iter: int = 200) -> ConicSolution:
    """Solve a linear SDP; never raises on solver status, callers inspect ``status``."""
    prog.validate()
    cp, cvars, problem = _cvx_model(prog)
    opts = {}
    if solver == "CLARABEL":
        opts = dict(tol_feas=tol, tol_gap_rel=gap_tol, tol_gap_abs=gap_tol, max_iter=max_iter)
    elif solver == "SCS":
        opts = dict(eps_abs=tol, eps_rel=gap_tol, max_iters=100 * max_iter)
    try:
        problem.solve(solver=solver, **opts)
    except cp.error.SolverError as exc:
        sol = ConicSolution({}, np.nan, "max_iterations", np.inf)
        raise ConicSolveError(f"{solver} failed: {exc}", sol) from exc
    status = _STATUS.get(problem.status, "max_iterations")
    values = {}
    if problem.status in ("optimal", "optimal_inaccurate"):
        for name, v in cvars.items():
            val = np.asarray(v.value, dtype=float)
            if name in prog.scalar_vars:
                val = float(val)
            values[name] = val
    stats = problem.solver_stats
    sol = ConicSolution(values, float(problem.value) if values else float(problem.value or np.nan),
                        status, np.nan, solve_time=stats.solve_time or 0.0)
    if values:
        sol.lmi_violation, sol.eq_residual = prog.residuals(values)
        extra = getattr(stats, "extra_stats", None)
        gap = getattr(extra, "gap_rel", None) if extra is not None else None
        if gap is None and isinstance(extra, dict):
            gap = extra.get("gap_rel")
        sol.gap = float(gap) if gap is not None else np.nan
    return sol


# --------------------------------------------------------------------------
# map recovery


def min_frobenius_program(P: np.ndarray, ops, pattern=None) -> ConicProgram:
    """``min ||Phi||_F^2`` s.t. ``[[P, Q'Phi'], [Phi Q, I]] >= 0``, ``Phi R = I``, pattern.

    The squared norm is linearised with the epigraph ``[[W, Phi'], [Phi, I]] >= 0``
    and objective ``Tr W``.
    """
    pattern = ops.pattern if pattern is None else pattern
    n, nr, nc = ops.n_xi, ops.n_rows, ops.n_cols
    prog = ConicProgram()
    prog.free_matrix_vars["Phi"] = ((nr, nc), pattern)
    prog.matrix_vars["W"] = (nc, None, None)
    prog.objective["W"] = np.eye(nc)
    top_n = np.vstack([np.eye(n), np.zeros((nr, n))])
    bot_n = np.vstack([np.zeros((n, nr)), np.eye(nr)])
    const = np.zeros((n + nr, n + nr))
    const[:n, :n] = 0.5 * (P + P.T)
    const[n:, n:] = np.eye(nr)
    prog.lmis.append(LMI(const, [
        Term("Phi", bot_n, ops.Q @ top_n.T),
        Term("Phi", top_n @ ops.Q.T, bot_n.T, transpose=True),
    ], "schur"))
    top_c = np.vstack([np.eye(nc), np.zeros((nr, nc))])
    bot_c = np.vstack([np.zeros((nc, nr)), np.eye(nr)])
    const2 = np.zeros((nc + nr, nc + nr))
    const2[nc:, nc:] = np.eye(nr)
    prog.lmis.append(LMI(const2, [
        Term("W", top_c, top_c.T),
        Term("Phi", bot_c, top_c.T),
        Term("Phi", top_c, bot_c.T, transpose=True),
    ], "frobenius-epigraph"))
    prog.equalities.append(Equality([Term("Phi", np.eye(nr), ops.R)], np.eye(nr), "achievability"))
    return prog


def min_frobenius_recovery(P: np.ndarray, ops, pattern=None, tol: float = DEFAULT_FEAS_TOL):
    """Smallest-Frobenius achievable map whose loss matrix is dominated by ``P``."""
    from .sls import ClosedLoopMaps

    prog = min_frobenius_program(P, ops, pattern)
    sol = solve_linear_sdp(prog, tol=tol)
    if sol.status == "infeasible":
        raise ConicSolveError("no achievable Phi satisfies Q'Phi'Phi Q <= P", sol)
    if not sol.values:
        raise ConicSolveError(f"map recovery failed with status {sol.status}", sol)
    return ClosedLoopMaps.from_stacked(sol.values["Phi"], ops), sol
