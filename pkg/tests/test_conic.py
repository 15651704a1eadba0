import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sinkdrse.bench import case_study_system
from sinkdrse.conic import (
    LMI,
    ConicProgram,
    ConicSolveError,
    NotPositiveDefiniteError,
    Term,
    cholesky,
    logdet_psd,
    min_frobenius_program,
    min_frobenius_recovery,
    solve_linear_sdp,
)
from sinkdrse.drse import pinv_gram
from sinkdrse.sls import build_sls_operators, check_achievability

from conftest import small_system


def test_scalar_lmi():
    prog = ConicProgram(scalar_vars={"x": (None, None)}, objective={"x": 1.0})
    prog.lmis.append(LMI(np.array([[0.0, 1.0], [1.0, 0.0]]), [Term("x", np.eye(2), np.eye(2))]))
    sol = solve_linear_sdp(prog)
    assert sol.status == "optimal"
    assert sol.values["x"] == pytest.approx(1.0, rel=1e-6)


def test_trace_above_indefinite_matrix():
    V = np.linalg.qr(np.random.default_rng(0).standard_normal((2, 2)))[0]
    M = V @ np.diag([2.0, -1.0]) @ V.T
    prog = ConicProgram(matrix_vars={"P": (2, M, None)}, objective={"P": np.eye(2)})
    sol = solve_linear_sdp(prog)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(1.0, rel=1e-6)


@given(st.integers(0, 1000))
def test_max_eigenvalue_lower_bound(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 4))
    M = A + A.T
    prog = ConicProgram(scalar_vars={"l": (None, None)}, objective={"l": -1.0})
    prog.lmis.append(LMI(M, [Term("l", -np.eye(4), np.eye(4))]))
    sol = solve_linear_sdp(prog)
    assert sol.values["l"] == pytest.approx(np.linalg.eigvalsh(M)[0], rel=1e-6, abs=1e-7)


def test_logdet_values():
    assert logdet_psd(np.eye(5)) == 0.0
    assert logdet_psd(np.diag([2.0, 8.0])) == pytest.approx(np.log(16.0), rel=1e-14)


@given(st.integers(0, 10_000))
def test_logdet_matches_eigs(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, 6))
    M = A @ A.T + 0.1 * np.eye(6)
    assert logdet_psd(M) == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(M))), rel=1e-10)


@given(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0))
def test_logdet_monotone_in_shift(d1, d2):
    A = np.random.default_rng(3).standard_normal((4, 2))
    lo, hi = sorted((d1, d2))
    if hi > lo:
        assert logdet_psd(A @ A.T + lo * np.eye(4)) < logdet_psd(A @ A.T + hi * np.eye(4))


def test_not_pd_pivot():
    with pytest.raises(NotPositiveDefiniteError) as exc:
        cholesky(np.diag([1.0, 2.0, -1.0]))
    assert exc.value.pivot == 2


def test_undeclared_variable():
    prog = ConicProgram(objective={"y": 1.0})
    with pytest.raises(KeyError):
        prog.validate()


def test_json_dump_roundtrips():
    ops = build_sls_operators(small_system(2))
    prog = min_frobenius_program(pinv_gram(ops), ops)
    doc = json.loads(prog.to_json())
    assert set(doc) == {"scalar_vars", "matrix_vars", "free_matrix_vars", "objective", "lmis", "equalities"}
    assert doc["free_matrix_vars"]["Phi"]["shape"] == [ops.n_rows, ops.n_cols]
    assert np.allclose(doc["equalities"][0]["terms"][0]["right"], ops.R)


def test_recovery_from_pinv_gram_full_pattern():
    ops = build_sls_operators(small_system(3))
    full = np.ones((ops.n_rows, ops.n_cols), dtype=bool)
    P = pinv_gram(ops)
    maps, sol = min_frobenius_recovery(P, ops, pattern=full)
    assert sol.status == "optimal"
    assert sol.objective <= np.linalg.norm(ops.R_pinv, "fro") ** 2 + 1e-6
    assert np.linalg.norm(sol.values["Phi"] @ ops.R - np.eye(ops.n_rows)) <= 1e-7
    # larger P: objective unchanged or smaller
    _, sol2 = min_frobenius_recovery(100 * P, ops, pattern=full)
    assert sol2.objective <= sol.objective + 1e-6


def test_recovery_respects_pattern_and_domination():
    sys = case_study_system(3)
    ops = build_sls_operators(sys)
    from sinkdrse.drse import solve_h2
    maps0, _ = solve_h2(ops, np.eye(ops.n_xi))
    P = ops.quad(maps0.Phi) + 1e-3 * np.eye(ops.n_xi)
    maps, sol = min_frobenius_recovery(P, ops)
    assert maps.pattern_violation() == 0.0
    assert check_achievability(maps, ops) <= 1e-7
    assert np.linalg.eigvalsh(P - ops.quad(maps.Phi))[0] >= -1e-6


def test_recovery_infeasible_for_zero_P():
    ops = build_sls_operators(small_system(3))
    with pytest.raises(ConicSolveError):
        min_frobenius_recovery(np.zeros((ops.n_xi, ops.n_xi)), ops)
