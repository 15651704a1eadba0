"""Finite-horizon system level synthesis for state estimation.

The stacked error trajectory ``e_bar = [e(t0); ...; e(t0+T)]`` of the observer

    xhat(t+1) = A_t xhat(t) + sum_{i=t0}^{t} L_{i|t} (y(i) - C_i xhat(i))

is an affine image of the stacked uncertainty ``xi = [e(t0); w(t0); ...;
w(t0+T-1)]``, ``e_bar = Phi Q xi`` with ``Phi = [Phi_x Phi_y]`` subject to
``Phi R = I``.  This module builds ``Z, Abar, Bbar, Cbar, Dbar, R, Q`` and maps
between observer gains and closed-loop maps.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACHIEVABILITY_TOL = 1e-8
_PATTERN_TOL = 1e-9
_COND_LIMIT = 1e12


class DimensionError(ValueError):
    """Raised when matrix shapes are inconsistent."""


class SingularMapError(np.linalg.LinAlgError):
    """Raised when ``Phi_x`` cannot be inverted reliably."""


@dataclass(frozen=True)
class LtvSystem:
    """Linear time-varying system ``x+ = A x + B w``, ``y = C x + D w``.

    ``A[k]`` etc. hold the matrices at absolute time ``t0 + k`` for
    ``k = 0, ..., T-1``.
    """

    t0: int
    T: int
    A: tuple
    B: tuple
    C: tuple
    D: tuple

    def __post_init__(self):
        for name in ("A", "B", "C", "D"):
            mats = tuple(np.atleast_2d(np.asarray(m, dtype=float)) for m in getattr(self, name))
            for m in mats:
                m.setflags(write=False)
            object.__setattr__(self, name, mats)
        if self.T < 1:
            raise DimensionError(f"horizon T must be positive, got {self.T}")
        for name in ("A", "B", "C", "D"):
            if len(getattr(self, name)) != self.T:
                raise DimensionError(
                    f"{name} has {len(getattr(self, name))} matrices, expected T={self.T}"
                )
        nx, nw, ny = self.A[0].shape[0], self.B[0].shape[1], self.C[0].shape[0]
        expected = {"A": (nx, nx), "B": (nx, nw), "C": (ny, nx), "D": (ny, nw)}
        for name, shape in expected.items():
            for k, m in enumerate(getattr(self, name)):
                if m.shape != shape:
                    raise DimensionError(
                        f"{name} at time index t={self.t0 + k} has shape {m.shape}, "
                        f"expected {shape}"
                    )
        if self.T < nx:
            raise DimensionError(f"horizon T={self.T} must satisfy T >= n_x={nx}")

    @property
    def nx(self) -> int:
        return self.A[0].shape[0]

    @property
    def ny(self) -> int:
        return self.C[0].shape[0]

    @property
    def nw(self) -> int:
        return self.B[0].shape[1]

    @property
    def n_xi(self) -> int:
        return self.nx + self.T * self.nw

    @classmethod
    def constant(cls, A, B, C, D, T: int, t0: int = 0) -> "LtvSystem":
        return cls(t0, T, (A,) * T, (B,) * T, (C,) * T, (D,) * T)

    @classmethod
    def from_dict(cls, doc: dict) -> "LtvSystem":
        """Build from the JSON layout; ``X_const`` replicates across the horizon."""
        T = int(doc["T"])
        t0 = int(doc.get("t0", 0))
        mats = {}
        for name in ("A", "B", "C", "D"):
            if f"{name}_const" in doc:
                mats[name] = (np.asarray(doc[f"{name}_const"], dtype=float),) * T
            elif name in doc:
                mats[name] = tuple(np.asarray(m, dtype=float) for m in doc[name])
            else:
                raise KeyError(f"system document lacks '{name}' or '{name}_const'")
        return cls(t0, T, **mats)

    def to_dict(self) -> dict:
        out = {"t0": self.t0, "T": self.T}
        for name in ("A", "B", "C", "D"):
            out[name] = [m.tolist() for m in getattr(self, name)]
        return out


def load_system(path) -> LtvSystem:
    with open(path) as fh:
        return LtvSystem.from_dict(json.load(fh))


@dataclass(frozen=True)
class SlsOperators:
    """Stacked operators of the error recursion ``e = Z Abar e + Bbar xi - L(Cbar Z e + Dbar xi)``."""

    nx: int
    ny: int
    nw: int
    T: int
    t0: int
    Z: np.ndarray
    Abar: np.ndarray
    Bbar: np.ndarray
    Cbar: np.ndarray
    Dbar: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    n_xi: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_rows(self) -> int:
        """Row count of ``Phi``: ``(T+1) n_x``."""
        return (self.T + 1) * self.nx

    @property
    def n_cols(self) -> int:
        """Column count of ``Phi = [Phi_x Phi_y]``: ``(T+1)(n_x+n_y)``."""
        return (self.T + 1) * (self.nx + self.ny)

    @property
    def R_pinv(self) -> np.ndarray:
        if "R_pinv" not in self._cache:
            self._cache["R_pinv"] = np.linalg.pinv(self.R)
        return self._cache["R_pinv"]

    @property
    def pattern(self) -> np.ndarray:
        """Admissible-nonzero mask of ``[Phi_x Phi_y]``."""
        if "pattern" not in self._cache:
            self._cache["pattern"] = map_pattern(self.T, self.nx, self.ny)
        return self._cache["pattern"]

    def quad(self, Phi: np.ndarray) -> np.ndarray:
        """``Q^T Phi^T Phi Q``, the loss matrix of ``xi``."""
        PQ = Phi @ self.Q
        return PQ.T @ PQ


def _blockdiag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def build_sls_operators(sys: LtvSystem) -> SlsOperators:
    nx, ny, nw, T = sys.nx, sys.ny, sys.nw, sys.T
    n = (T + 1) * nx
    Z = np.kron(np.eye(T + 1, k=-1), np.eye(nx))
    Abar = _blockdiag(list(sys.A) + [np.zeros((nx, nx))])
    Bbar = _blockdiag([np.eye(nx)] + list(sys.B))
    Cbar = _blockdiag([np.zeros((ny, nx))] + list(sys.C))
    Dbar = _blockdiag([np.zeros((ny, nx))] + list(sys.D))
    R = np.vstack([np.eye(n) - Z @ Abar, Cbar @ Z])
    Q = np.vstack([Bbar, -Dbar])
    for m in (Z, Abar, Bbar, Cbar, Dbar, R, Q):
        m.setflags(write=False)
    return SlsOperators(nx, ny, nw, T, sys.t0, Z, Abar, Bbar, Cbar, Dbar, R, Q, nx + T * nw)


def map_pattern(T: int, nx: int, ny: int) -> np.ndarray:
    """Boolean mask of admissible entries of ``[Phi_x Phi_y]``.

    Both halves are block lower-triangular.  The first block column of
    ``Phi_y`` is also zero: it multiplies the zero leading blocks of ``Cbar Z``
    and ``Dbar`` and is zero for every map generated by a gain.
    """
    lower = np.tril(np.ones((T + 1, T + 1), dtype=bool))
    px = np.kron(lower, np.ones((nx, nx), dtype=bool))
    ly = lower.copy()
    ly[:, 0] = False
    py = np.kron(ly, np.ones((nx, ny), dtype=bool))
    return np.hstack([px, py])


def gain_pattern(T: int, nx: int, ny: int) -> np.ndarray:
    """Mask of the stacked gain ``L``: block ``(r, c)`` free iff ``1 <= c <= r``."""
    lower = np.tril(np.ones((T + 1, T + 1), dtype=bool))
    lower[:, 0] = False
    return np.kron(lower, np.ones((nx, ny), dtype=bool))


@dataclass(frozen=True)
class ClosedLoopMaps:
    Phi_x: np.ndarray
    Phi_y: np.ndarray
    pattern: np.ndarray
    nx: int
    ny: int
    t0: int = 0

    @property
    def T(self) -> int:
        return self.Phi_x.shape[0] // self.nx - 1

    @property
    def Phi(self) -> np.ndarray:
        return np.hstack([self.Phi_x, self.Phi_y])

    @classmethod
    def from_stacked(cls, Phi: np.ndarray, ops: SlsOperators, enforce_pattern: bool = True):
        Phi = np.array(Phi, dtype=float)
        if Phi.shape != (ops.n_rows, ops.n_cols):
            raise DimensionError(f"Phi has shape {Phi.shape}, expected {(ops.n_rows, ops.n_cols)}")
        if enforce_pattern:
            Phi[~ops.pattern] = 0.0
        return cls(Phi[:, :ops.n_rows], Phi[:, ops.n_rows:], ops.pattern, ops.nx, ops.ny, ops.t0)

    def pattern_violation(self) -> float:
        return float(np.max(np.abs(self.Phi[~self.pattern]), initial=0.0))


@dataclass(frozen=True)
class ObserverGain:
    """Stacked observer gain with blocks ``L_{i|t}``.

    Block row ``r`` (``r >= 1``) corrects ``e(t0 + r)`` and holds
    ``L_{t0|t0+r-1}, ..., L_{t0+r-1|t0+r-1}`` in block columns ``1..r``.
    """

    L: np.ndarray
    T: int
    nx: int
    ny: int
    t0: int = 0

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        shape = ((self.T + 1) * self.nx, (self.T + 1) * self.ny)
        if L.shape != shape:
            raise DimensionError(f"L has shape {L.shape}, expected {shape}")
        object.__setattr__(self, "L", L)

    @classmethod
    def zeros(cls, ops: SlsOperators) -> "ObserverGain":
        return cls(np.zeros((ops.n_rows, (ops.T + 1) * ops.ny)), ops.T, ops.nx, ops.ny, ops.t0)

    @classmethod
    def from_blocks(cls, blocks: dict, ops: SlsOperators) -> "ObserverGain":
        """Build from ``{(i, t): L_{i|t}}`` with absolute time indices."""
        g = cls.zeros(ops)
        for (i, t), blk in blocks.items():
            g = g._with_block(i, t, blk)
        return g

    def _slices(self, i: int, t: int):
        if not (self.t0 <= i <= t <= self.t0 + self.T - 1):
            raise IndexError(f"L_{{{i}|{t}}} outside t0 <= i <= t <= t0+T-1")
        r = t - self.t0 + 1
        c = i - self.t0 + 1
        return (slice(r * self.nx, (r + 1) * self.nx), slice(c * self.ny, (c + 1) * self.ny))

    def _with_block(self, i, t, blk):
        L = self.L.copy()
        L[self._slices(i, t)] = np.asarray(blk, dtype=float).reshape(self.nx, self.ny)
        return ObserverGain(L, self.T, self.nx, self.ny, self.t0)

    def block(self, i: int, t: int) -> np.ndarray:
        """``L_{i|t}`` with absolute time indices."""
        return self.L[self._slices(i, t)]

    def block_relative(self, di: int, dt: int) -> np.ndarray:
        """``L_{t0+di | t0+dt}``; offsets count from the horizon start."""
        return self.block(self.t0 + di, self.t0 + dt)

    def pattern_violation(self) -> float:
        mask = gain_pattern(self.T, self.nx, self.ny)
        return float(np.max(np.abs(self.L[~mask]), initial=0.0))


def maps_from_gain(gain: ObserverGain, ops: SlsOperators) -> ClosedLoopMaps:
    if gain.pattern_violation() > 0:
        raise ValueError("gain has nonzero entries outside the causal pattern")
    M = np.eye(ops.n_rows) - ops.Z @ ops.Abar + gain.L @ ops.Cbar @ ops.Z
    try:
        Phi_x = np.linalg.solve(M, np.eye(ops.n_rows))
    except np.linalg.LinAlgError as exc:
        raise SingularMapError("I - Z Abar + L Cbar Z is singular") from exc
    Phi_y = Phi_x @ gain.L
    return ClosedLoopMaps.from_stacked(np.hstack([Phi_x, Phi_y]), ops)


def recover_gain(maps: ClosedLoopMaps) -> ObserverGain:
    """``L = Phi_x^{-1} Phi_y`` with sub-tolerance pattern leakage zeroed."""
    Phi_x, Phi_y = maps.Phi_x, maps.Phi_y
    cond = np.linalg.cond(Phi_x)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularMapError(f"Phi_x is numerically singular (cond={cond:.3e})")
    L = np.linalg.solve(Phi_x, Phi_y)
    T, nx, ny = maps.T, maps.nx, maps.ny
    mask = gain_pattern(T, nx, ny)
    leak = float(np.max(np.abs(L[~mask]), initial=0.0))
    if leak > _PATTERN_TOL:
        warnings.warn(f"recovered gain leaks {leak:.2e} outside the causal pattern", RuntimeWarning)
    L[~mask] = 0.0
    return ObserverGain(L, T, nx, ny, maps.t0)


def check_achievability(maps: ClosedLoopMaps, ops: SlsOperators) -> float:
    """Frobenius residual ``||[Phi_x Phi_y] R - I||_F``."""
    return float(np.linalg.norm(maps.Phi @ ops.R - np.eye(ops.n_rows)))


def rollout_error(maps_or_gain, ops: SlsOperators, xi: np.ndarray) -> np.ndarray:
    """Stacked error ``Phi Q xi``; ``xi`` may be one vector or rows of vectors."""
    if isinstance(maps_or_gain, ObserverGain):
        maps_or_gain = maps_from_gain(maps_or_gain, ops)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != ops.n_xi:
        raise DimensionError(f"xi has length {xi.shape[-1]}, expected n_xi={ops.n_xi}")
    PQ = maps_or_gain.Phi @ ops.Q
    return xi @ PQ.T if xi.ndim == 2 else PQ @ xi


def simulate_observer(gain: ObserverGain, sys: LtvSystem, xi: np.ndarray, x0=None) -> np.ndarray:
    """Run the plant and the observer step by step and return ``x - xhat`` stacked.

    ``x0`` is the true initial state (defaults to zero); the observer starts
    from ``x0 - e(t0)``.
    """
    nx, nw, T = sys.nx, sys.nw, sys.T
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (nx + T * nw,):
        raise DimensionError(f"xi has shape {xi.shape}, expected ({nx + T * nw},)")
    e0, w = xi[:nx], xi[nx:].reshape(T, nw)
    x = np.zeros(nx) if x0 is None else np.asarray(x0, dtype=float)
    xhat = x - e0
    xs, xhats, innov = [x], [xhat], []
    for k in range(T):
        t = sys.t0 + k
        y = sys.C[k] @ x + sys.D[k] @ w[k]
        innov.append(y - sys.C[k] @ xhat)
        corr = sum(gain.block(sys.t0 + j, t) @ innov[j] for j in range(k + 1))
        xhat = sys.A[k] @ xhat + corr
        x = sys.A[k] @ x + sys.B[k] @ w[k]
        xs.append(x)
        xhats.append(xhat)
    return np.concatenate(xs) - np.concatenate(xhats)
