"""Affine parametrization of achievable maps and a barrier Newton solver.

Every pattern-respecting ``Phi`` with ``Phi R = I`` is written row by row as
``phi_i = phi0_i + N_i z_i`` where ``N_i`` is an orthonormal basis of the
admissible null space.  ``Y = Phi Q`` is then affine in ``z`` and each basis
direction changes one row of ``Y`` only, which keeps derivative assembly cheap.

The solver minimises, over ``(z, lam)``,

    f(z, lam) = lin*lam + <Y'Y, G> + lam^2 Tr(S M^{-1}) + ent*(n lam log lam - lam logdet M)

with ``M = lam*Omega - Y'Y`` subject to ``M >= kappa I`` and optionally
``lam <= lam_cap``.  ``f`` is jointly convex (the third term is a matrix
fractional function, the fourth a perspective of ``-logdet``), so the
central-path gap ``m/t`` certifies suboptimality.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .conic import NotPositiveDefiniteError, cholesky

log = logging.getLogger(__name__)


class AchievableSpace:
    """``{Phi : Phi R = I, Phi zero off the pattern}`` as ``Phi0 + sum z_j E_j``."""

    def __init__(self, ops, pattern=None):
        pattern = ops.pattern if pattern is None else np.asarray(pattern, dtype=bool)
        nr, nc = ops.n_rows, ops.n_cols
        R, Q = np.asarray(ops.R), np.asarray(ops.Q)
        self.ops = ops
        self.pattern = pattern
        self.Phi0 = np.zeros((nr, nc))
        self.free_idx, self.bases = [], []
        rows, dirs = [], []
        for i in range(nr):
            F = np.flatnonzero(pattern[i])
            RF = R[F, :]
            e = np.zeros(nr)
            e[i] = 1.0
            phi, *_ = np.linalg.lstsq(RF.T, e, rcond=None)
            if np.linalg.norm(RF.T @ phi - e) > 1e-9:
                raise ValueError(f"row {i} of Phi cannot satisfy Phi R = I within the pattern")
            self.Phi0[i, F] = phi
            N = sla.null_space(RF.T)
            self.free_idx.append(F)
            self.bases.append(N)
            dirs.append(N.T @ Q[F, :])
            rows.extend([i] * N.shape[1])
        self.row_of = np.asarray(rows, dtype=int)
        self.U = np.vstack(dirs) if dirs else np.zeros((0, Q.shape[1]))
        self.Y0 = self.Phi0 @ Q
        self.offsets = np.concatenate([[0], np.cumsum([N.shape[1] for N in self.bases])])
        self.same_row = self.row_of[:, None] == self.row_of[None, :]

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    def Y(self, z: np.ndarray) -> np.ndarray:
        Y = self.Y0.copy()
        np.add.at(Y, self.row_of, z[:, None] * self.U)
        return Y

    def Phi(self, z: np.ndarray) -> np.ndarray:
        Phi = self.Phi0.copy()
        for i, (F, N) in enumerate(zip(self.free_idx, self.bases)):
            a, b = self.offsets[i], self.offsets[i + 1]
            if b > a:
                Phi[i, F] += N @ z[a:b]
        return Phi

    def project(self, Phi: np.ndarray) -> np.ndarray:
        """Coordinates of an achievable ``Phi``."""
        z = np.empty(self.dim)
        for i, (F, N) in enumerate(zip(self.free_idx, self.bases)):
            a, b = self.offsets[i], self.offsets[i + 1]
            z[a:b] = N.T @ (Phi[i, F] - self.Phi0[i, F])
        return z

    def fixed_row_gram(self) -> np.ndarray:
        """``sum y_i y_i'`` over rows of ``Y`` that no achievable map can change.

        A Loewner lower bound on ``Q' Phi' Phi Q`` valid for every achievable
        ``Phi``.
        """
        counts = np.bincount(self.row_of, minlength=self.Y0.shape[0])
        fixed = counts == 0
        if self.dim:
            # rows whose directions all vanish after multiplying by Q are fixed too
            norms = np.zeros(self.Y0.shape[0])
            np.add.at(norms, self.row_of, np.sum(self.U ** 2, axis=1))
            fixed |= norms == 0.0
        Yf = self.Y0[fixed]
        return Yf.T @ Yf


@dataclass
class ReducedProblem:
    space: AchievableSpace
    Omega: np.ndarray
    Sbar: np.ndarray          # (1/N) sum xi xi'
    lin: float
    G: np.ndarray | None = None
    ent: float = 0.0
    kappa: float = 0.0
    lam_cap: float | None = None

    @property
    def n(self) -> int:
        return self.Omega.shape[0]

    @property
    def barrier_degree(self) -> int:
        return self.n + (self.lam_cap is not None)

    def M(self, z, lam):
        Y = self.space.Y(z)
        return lam * self.Omega - Y.T @ Y, Y

    def feasible(self, z, lam) -> bool:
        if self.lam_cap is not None and lam >= self.lam_cap:
            return False
        if lam <= 0:
            return False
        M, _ = self.M(z, lam)
        try:
            cholesky(M - self.kappa * np.eye(self.n))
        except NotPositiveDefiniteError:
            return False
        return True

    def value(self, z, lam) -> float:
        M, Y = self.M(z, lam)
        c = cholesky(M)
        Minv_S = sla.cho_solve((c, True), self.Sbar)
        f = self.lin * lam + lam ** 2 * np.trace(Minv_S)
        if self.G is not None:
            f += np.sum((Y.T @ Y) * self.G)
        if self.ent:
            f += self.ent * (self.n * lam * np.log(lam) - lam * 2.0 * np.sum(np.log(np.diag(c))))
        return float(f)

    # ------------------------------------------------------------------
    def _cross(self, P1, P2, Y):
        """``H[a, b] = Tr(P1 dM_a P2 dM_b)`` for ``a, b`` over ``(z, lam)``."""
        sp = self.space
        U, V = sp.U, Y[sp.row_of]
        d = sp.dim
        H = np.empty((d + 1, d + 1))
        UP1, VP1, UP2, VP2 = U @ P1, V @ P1, U @ P2, V @ P2
        H[:d, :d] = ((VP2 @ U.T) * (UP1 @ V.T) + (VP2 @ V.T) * (UP1 @ U.T)
                     + (UP2 @ U.T) * (VP1 @ V.T) + (UP2 @ V.T) * (VP1 @ U.T))
        K = P2 @ self.Omega @ P1
        H[:d, d] = -(np.sum((V @ K) * U, axis=1) + np.sum((U @ K) * V, axis=1))
        H[d, :d] = H[:d, d]
        H[d, d] = np.sum((P1 @ self.Omega) * (P2 @ self.Omega).T)
        return H

    def _dtrace(self, P, Y):
        """``Tr(P dM_a)`` for ``a`` over ``(z, lam)``."""
        sp = self.space
        V = Y[sp.row_of]
        g = np.empty(sp.dim + 1)
        g[:-1] = -2.0 * np.sum((sp.U @ P) * V, axis=1)
        g[-1] = np.sum(P * self.Omega)
        return g

    def _second(self, P):
        """``Tr(P d2M_ab)``; nonzero for ``z``-``z`` pairs only."""
        sp = self.space
        d = sp.dim
        H = np.zeros((d + 1, d + 1))
        H[:d, :d] = -2.0 * (sp.U @ P @ sp.U.T) * sp.same_row
        return H

    def derivatives(self, z, lam):
        """Value, gradient and Hessian of ``f`` plus the barrier's, at a feasible point."""
        sp = self.space
        n, d = self.n, sp.dim
        M, Y = self.M(z, lam)
        cM = cholesky(M)
        X = sla.cho_solve((cM, True), np.eye(n))
        X = 0.5 * (X + X.T)
        W = X @ self.Sbar @ X
        W = 0.5 * (W + W.T)
        A = float(np.sum(X * self.Sbar))
        A1 = -self._dtrace(W, Y)
        A2 = 2.0 * self._cross(W, X, Y) - self._second(W)

        f = self.lin * lam + lam ** 2 * A
        g = lam ** 2 * A1
        g[d] += self.lin + 2.0 * lam * A
        H = lam ** 2 * A2
        H[:d, d] += 2.0 * lam * A1[:d]
        H[d, :d] += 2.0 * lam * A1[:d]
        H[d, d] += 2.0 * A + 4.0 * lam * A1[d]

        if self.G is not None:
            f += float(np.sum((Y.T @ Y) * self.G))
            YG = Y @ self.G
            g[:d] += 2.0 * np.sum(sp.U * YG[sp.row_of], axis=1)
            H[:d, :d] += 2.0 * (sp.U @ self.G @ sp.U.T) * sp.same_row

        if self.ent:
            B = 2.0 * float(np.sum(np.log(np.diag(cM))))
            B1 = self._dtrace(X, Y)
            B2 = -self._cross(X, X, Y) + self._second(X)
            e = self.ent
            f += e * (n * lam * np.log(lam) - lam * B)
            g += -e * lam * B1
            g[d] += e * (n * (np.log(lam) + 1.0) - B)
            H += -e * lam * B2
            H[:d, d] += -e * B1[:d]
            H[d, :d] += -e * B1[:d]
            H[d, d] += e * (n / lam - 2.0 * B1[d])

        # barrier
        Mk = M - self.kappa * np.eye(n)
        ck = cholesky(Mk)
        Xk = sla.cho_solve((ck, True), np.eye(n))
        Xk = 0.5 * (Xk + Xk.T)
        phi = -2.0 * float(np.sum(np.log(np.diag(ck))))
        gb = -self._dtrace(Xk, Y)
        Hb = self._cross(Xk, Xk, Y) - self._second(Xk)
        if self.lam_cap is not None:
            s = self.lam_cap - lam
            phi -= np.log(s)
            gb[d] += 1.0 / s
            Hb[d, d] += 1.0 / s ** 2
        return f, g, H, phi, gb, Hb


@dataclass
class ReducedResult:
    z: np.ndarray
    lam: float
    value: float
    gap: float            # certified bound on value - optimum
    newton_steps: int
    status: str           # optimal | max_iterations


def barrier_solve(prob: ReducedProblem, z0, lam0, gap_tol: float = 1e-9, rel_tol: float = 1e-10,
                  mu: float = 20.0, max_newton: int = 400, t0: float | None = None) -> ReducedResult:
    """Path-following barrier method from a strictly feasible ``(z0, lam0)``.

    Stops when ``m/t <= max(gap_tol, rel_tol*|f|)``.
    """
    z, lam = np.array(z0, dtype=float), float(lam0)
    if not prob.feasible(z, lam):
        raise ValueError("barrier_solve needs a strictly feasible starting point")
    m = prob.barrier_degree
    f = prob.value(z, lam)
    t = t0 if t0 is not None else m / max(abs(f), 1e-12)
    d = prob.space.dim
    steps = 0
    status = "max_iterations"
    while steps < max_newton:
        # centering
        while steps < max_newton:
            f, g, H, phi, gb, Hb = prob.derivatives(z, lam)
            grad = t * g + gb
            hess = t * H + Hb
            hess = 0.5 * (hess + hess.T)
            try:
                step = -sla.solve(hess, grad, assume_a="pos")
            except (np.linalg.LinAlgError, ValueError):
                step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            dec2 = float(-grad @ step)
            steps += 1
            if dec2 / 2.0 <= 1e-10:
                break
            obj0 = t * f + phi
            # differences below this are roundoff at the current scale
            noise = 1e-13 * (abs(t * f) + abs(phi) + 1.0)
            alpha = 1.0
            while alpha > 1e-14:
                zn, ln = z + alpha * step[:d], lam + alpha * step[d]
                if prob.feasible(zn, ln):
                    objn = t * prob.value(zn, ln) + _barrier_value(prob, zn, ln)
                    if objn <= obj0 - 0.25 * alpha * dec2 + noise:
                        break
                alpha *= 0.5
            else:
                break
            z, lam = zn, ln
            if obj0 - objn <= noise:
                break
        gap = m / t
        if gap <= max(gap_tol, rel_tol * abs(f)):
            status = "optimal"
            break
        t *= mu
    f = prob.value(z, lam)
    return ReducedResult(z, lam, f, m / t, steps, status)


def _barrier_value(prob: ReducedProblem, z, lam) -> float:
    M, _ = prob.M(z, lam)
    ck = cholesky(M - prob.kappa * np.eye(prob.n))
    phi = -2.0 * float(np.sum(np.log(np.diag(ck))))
    if prob.lam_cap is not None:
        phi -= np.log(prob.lam_cap - lam)
    return phi


def interior_lambda(prob: ReducedProblem, z, margin: float = 1.0) -> float:
    """A ``lam`` with ``lam*Omega - Y'Y - kappa I`` positive definite (ignores the cap)."""
    Y = prob.space.Y(z)
    P = Y.T @ Y + prob.kappa * np.eye(prob.n)
    top = float(sla.eigvalsh(P, prob.Omega)[-1])
    return top * (1.0 + margin) + 1e-12
