import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st

from sinkdrse.ambiguity import SampleSet, SinkhornConfig, feasibility_threshold, omega
from sinkdrse.bench import case_study_system, reference_sigma
from sinkdrse.drse import (
    DualIterate,
    InfeasibleRadiusError,
    compute_bounds,
    curvature_bound,
    dual_objective,
    eliminate_q,
    frank_wolfe_solve,
    gradients,
    initialize,
    lmo_direction,
    pinv_gram,
    reduced_objective,
    solve_h2,
    solve_sinkhorn_direct,
    solve_wasserstein,
)
from sinkdrse.sls import build_sls_operators, check_achievability

from conftest import small_samples, small_system


def random_iterate(rng, cfg, N, scale=1.0):
    n = cfg.n_xi
    A = rng.standard_normal((n, n))
    P = scale * (A @ A.T) / n
    lam = 1.05 * float(sla.eigvalsh(P, omega(cfg))[-1]) + 0.1
    return DualIterate(P, lam, rng.standard_normal(N))


# ---------------------------------------------------------------- H2


def test_h2_scaling_invariance(small):
    _, ops, _ = small
    m1, v1 = solve_h2(ops, np.eye(ops.n_xi))
    m2, v2 = solve_h2(ops, 2 * np.eye(ops.n_xi))
    np.testing.assert_allclose(m1.Phi, m2.Phi, atol=1e-8)
    assert v2 == pytest.approx(2 * v1, rel=1e-12)


@given(st.floats(0.1, 10.0))
def test_h2_argmin_invariant_under_scaling(c):
    ops = build_sls_operators(case_study_system(4))
    A = np.random.default_rng(0).standard_normal((ops.n_xi, ops.n_xi))
    Sig = A @ A.T / ops.n_xi + np.eye(ops.n_xi)
    m1, v1 = solve_h2(ops, Sig)
    m2, v2 = solve_h2(ops, c ** 2 * Sig)
    np.testing.assert_allclose(m1.Phi, m2.Phi, atol=1e-8)
    assert v2 == pytest.approx(c ** 2 * v1, rel=1e-10)


def test_h2_feasible_and_beats_feasible_points():
    ops = build_sls_operators(case_study_system(10))
    maps, v = solve_h2(ops, np.eye(ops.n_xi))
    assert check_achievability(maps, ops) <= 1e-8
    assert maps.pattern_violation() == 0.0
    # R^+ is not causal, so it bounds nothing here; pattern-respecting maps do
    assert np.max(np.abs(ops.R_pinv[~ops.pattern])) > 1e-3
    from sinkdrse.sls import ObserverGain, maps_from_gain
    rng = np.random.default_rng(0)
    for _ in range(5):
        L = ObserverGain.zeros(ops).L
        from sinkdrse.sls import gain_pattern
        mask = gain_pattern(ops.T, ops.nx, ops.ny)
        L[mask] = 0.3 * rng.standard_normal(mask.sum())
        other = maps_from_gain(ObserverGain(L, ops.T, ops.nx, ops.ny), ops)
        assert v <= np.linalg.norm(other.Phi @ ops.Q) ** 2


def kalman_predictor_gains(sys, P0):
    P, gains = P0, []
    for k in range(sys.T):
        A, B, C, D = sys.A[k], sys.B[k], sys.C[k], sys.D[k]
        S = C @ P @ C.T + D @ D.T
        L = A @ P @ C.T @ np.linalg.inv(S)
        gains.append(L)
        P = A @ P @ A.T + B @ B.T - L @ S @ L.T
    return gains


def test_h2_equals_kalman_random_initial_covariance():
    sys = case_study_system(6)
    ops = build_sls_operators(sys)
    E = np.array([[0.7, 0.2], [0.2, 0.4]])
    from sinkdrse.sls import recover_gain
    gain = recover_gain(solve_h2(ops, reference_sigma(sys, E))[0])
    for t, Lk in enumerate(kalman_predictor_gains(sys, E)):
        np.testing.assert_allclose(gain.block(t, t), Lk, atol=1e-6)
        for i in range(t):
            assert np.linalg.norm(gain.block(i, t)) <= 1e-6


# ---------------------------------------------------------------- Wasserstein


def test_wasserstein_reduced_matches_sdp(small):
    _, ops, S = small
    _, it_r, v_r = solve_wasserstein(ops, S, 0.2)
    _, it_s, v_s = solve_wasserstein(ops, S, 0.2, backend="sdp")
    assert v_r == pytest.approx(v_s, rel=1e-5)
    assert it_r.lam == pytest.approx(it_s.lam, rel=1e-3)


def test_wasserstein_monotone_and_dominates_empirical(small):
    _, ops, S = small
    vals = []
    for th in (0.01, 0.05, 0.2, 1.0):
        maps, _, v = solve_wasserstein(ops, S, th)
        vals.append(v)
        emp = np.mean(np.sum((S.samples @ (maps.Phi @ ops.Q).T) ** 2, axis=1))
        assert v >= emp - 1e-8
    assert np.all(np.diff(vals) >= -1e-8)


def test_wasserstein_zero_sample_small_radius(small):
    _, ops, _ = small
    S0 = SampleSet(np.zeros((1, ops.n_xi)))
    v = [solve_wasserstein(ops, S0, th)[2] for th in (1e-2, 1e-4)]
    assert v[1] < v[0] and v[1] < 1e-2


# ---------------------------------------------------------------- dual objective


def _term_by_term(it, S, cfg):
    eps, n = cfg.epsilon, cfg.n_xi
    lam = it.lam
    _, ldS = np.linalg.slogdet(cfg.Sigma)
    _, ldM = np.linalg.slogdet(lam * omega(cfg) - it.P)
    return (lam * cfg.theta - 0.5 * lam * eps * ldS + 0.5 * lam * eps * n * np.log(lam * eps / 2)
            - 0.5 * lam * eps * ldM + np.mean(it.q))


@given(st.integers(0, 10_000), st.floats(1e-3, 1.0))
def test_dual_objective_term_by_term(seed, eps):
    rng = np.random.default_rng(seed)
    cfg = SinkhornConfig(eps, 0.7, np.eye(4) + 0.1 * np.ones((4, 4)))
    S = SampleSet(rng.standard_normal((5, 4)))
    it = random_iterate(rng, cfg, 5)
    assert dual_objective(it, S, cfg) == pytest.approx(_term_by_term(it, S, cfg), rel=1e-9)


def test_dual_objective_eps_zero_limit():
    rng = np.random.default_rng(0)
    S = SampleSet(rng.standard_normal((5, 3)))
    cfg = SinkhornConfig(1e-12, 0.7, np.eye(3))
    it = random_iterate(rng, cfg, 5)
    assert dual_objective(it, S, cfg) == pytest.approx(it.lam * 0.7 + np.mean(it.q), rel=1e-9)


def test_eliminate_q_examples():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 3))
    X[0] = 0
    S = SampleSet(X)
    cfg = SinkhornConfig(0.0, 1.0, np.eye(3))
    q = eliminate_q(np.zeros((3, 3)), 2.0, S, cfg)
    np.testing.assert_allclose(q, 0.0, atol=1e-12)
    cfg = SinkhornConfig(0.3, 1.0, np.eye(3))
    it = random_iterate(rng, cfg, 4)
    q = eliminate_q(it.P, it.lam, S, cfg)
    assert q[0] == 0.0
    M = it.lam * omega(cfg) - it.P
    for i in range(4):
        x = X[i]
        blk = np.block([[M, it.lam * x[:, None]], [it.lam * x[None, :], np.array([[q[i] + it.lam * x @ x]])]])
        e = np.linalg.eigvalsh(blk)[0]
        assert -1e-9 <= e <= 1e-9


def test_grad_q_is_one_over_N():
    rng = np.random.default_rng(0)
    S = SampleSet(rng.standard_normal((7, 3)))
    cfg = SinkhornConfig(0.1, 1.0, np.eye(3))
    it = random_iterate(rng, cfg, 7)
    np.testing.assert_array_equal(gradients(it.P, it.lam, S, cfg)[2], np.full(7, 1 / 7))


# ---------------------------------------------------------------- bounds


def test_pinv_gram_is_not_a_lower_bound():
    """``Q'(R^+)'R^+ Q`` exceeds ``Q'Phi'Phi Q`` along some direction for achievable maps."""
    ops = build_sls_operators(case_study_system(10))
    from sinkdrse.sls import ObserverGain, maps_from_gain
    zero = maps_from_gain(ObserverGain.zeros(ops), ops)
    assert np.linalg.eigvalsh(ops.quad(zero.Phi) - pinv_gram(ops))[0] < -1.0


def test_bounds_degrade_near_threshold(small):
    _, ops, S = small
    base = SinkhornConfig(1e-2, 1.0, np.eye(ops.n_xi))
    th0 = feasibility_threshold(S, base)
    his = []
    for f in (2.0, 1.2, 1.01):
        cfg = base.replace(theta=f * th0)
        it, _ = initialize("wasserstein", ops, S, cfg)
        his.append(compute_bounds(it, ops, S, cfg).lambda_hi)
    assert his[0] < his[1] < his[2]
    with pytest.raises(InfeasibleRadiusError):
        compute_bounds(it, ops, S, base.replace(theta=0.5 * th0))


def test_better_start_tighter_lambda_hi(small):
    sys, ops, S = small
    base = SinkhornConfig(1e-2, 1.0, np.eye(ops.n_xi))
    cfg = base.replace(theta=2 * feasibility_threshold(S, base))
    a, _ = initialize("wasserstein", ops, S, cfg)
    b, _ = initialize("pole_placement", ops, S, cfg, sys=sys)
    Ja, Jb = (reduced_objective(x.P, x.lam, S, cfg) for x in (a, b))
    ba, bb = (compute_bounds(x, ops, S, cfg).lambda_hi for x in (a, b))
    assert (Ja <= Jb) == (ba <= bb)


@pytest.mark.parametrize("strategy", ["wasserstein", "pole_placement"])
@pytest.mark.parametrize("lift", ["optimal", "boundary"])
def test_initialize_feasible(strategy, lift):
    sys = case_study_system(10)
    ops = build_sls_operators(sys)
    S = small_samples(ops.n_xi, N=30, seed=4)
    base = SinkhornConfig(10 ** -3.8, 1.0, np.eye(ops.n_xi))
    cfg = base.replace(theta=max(0.035, 1.5 * feasibility_threshold(S, base)))
    it, maps = initialize(strategy, ops, S, cfg, sys=sys, lift=lift)
    assert check_achievability(maps, ops) <= 1e-8
    M = it.lam * omega(cfg) - it.P
    assert np.linalg.eigvalsh(M - cfg.kappa_value * np.eye(ops.n_xi))[0] >= -1e-9


def test_wasserstein_start_beats_pole_placement():
    sys = case_study_system(10)
    ops = build_sls_operators(sys)
    S = small_samples(ops.n_xi, N=30, seed=4)
    cfg = SinkhornConfig(10 ** -3.8, 0.035, np.eye(ops.n_xi))
    a, _ = initialize("wasserstein", ops, S, cfg)
    b, _ = initialize("pole_placement", ops, S, cfg, sys=sys)
    assert reduced_objective(a.P, a.lam, S, cfg) <= reduced_objective(b.P, b.lam, S, cfg)


def test_curvature_bound_examples(small, small_cfg):
    _, ops, S = small
    it, _ = initialize("wasserstein", ops, S, small_cfg)
    b = compute_bounds(it, ops, S, small_cfg)
    cfg0 = SinkhornConfig(0.0, small_cfg.theta, np.eye(ops.n_xi), kappa=1e-3)
    diam2 = (np.linalg.norm(b.P_hi - b.P_lo) ** 2 + (b.lambda_hi - b.lambda_lo) ** 2
             + np.linalg.norm(b.q_hi - b.q_lo) ** 2)
    assert curvature_bound(b, cfg0) == pytest.approx(diam2 / 1e-6, rel=1e-12)
    from dataclasses import replace
    b2 = replace(b, P_hi=b.P_lo + 2 * (b.P_hi - b.P_lo), lambda_hi=b.lambda_lo + 2 * (b.lambda_hi - b.lambda_lo),
                 q_hi=b.q_lo + 2 * (b.q_hi - b.q_lo))
    b2_same_lip = curvature_bound(b2, cfg0) / curvature_bound(b, cfg0)
    assert b2_same_lip == pytest.approx(4.0, rel=1e-12)
    ks = [curvature_bound(b, small_cfg.replace(kappa=k)) for k in (1e-6, 1e-4, 1e-2)]
    assert ks[0] > ks[1] > ks[2]


# ---------------------------------------------------------------- LMO and Frank-Wolfe


def test_reduced_lmo_matches_sdp_lmo(small, small_cfg):
    _, ops, S = small
    it, _ = initialize("wasserstein", ops, S, small_cfg)
    b = compute_bounds(it, ops, S, small_cfg)
    g = gradients(it.P, it.lam, S, small_cfg)
    red = lmo_direction(g, b, ops, S, small_cfg)
    sdp = lmo_direction(g, b, ops, S, small_cfg, backend="sdp")
    assert red.value == pytest.approx(sdp.value, rel=1e-5, abs=1e-6)
    m = b.margins(red.direction)
    assert min(m.values()) >= -1e-7


def test_frank_wolfe_rejects_small_radius(small):
    _, ops, S = small
    cfg = SinkhornConfig(1e-2, 1e-6, np.eye(ops.n_xi))
    with pytest.raises(InfeasibleRadiusError):
        frank_wolfe_solve(ops, S, cfg)


@pytest.mark.parametrize("eps", [1e-2, 0.3])
def test_frank_wolfe_matches_direct_solve(small, eps):
    _, ops, S = small
    base = SinkhornConfig(eps, 1.0, np.eye(ops.n_xi))
    cfg = base.replace(theta=1.5 * feasibility_threshold(S, base))
    res = frank_wolfe_solve(ops, S, cfg, tol_gap=1e-7, max_iter=400)
    _, it, v, _ = solve_sinkhorn_direct(ops, S, cfg)
    assert res.status == "converged"
    assert res.value == pytest.approx(v, rel=1e-6)
    assert res.lower_bound <= v + 1e-8
    M = res.iterate.lam * omega(cfg) - res.iterate.P
    assert np.linalg.eigvalsh(M)[0] >= cfg.kappa_value - 1e-9
    steps = np.asarray(res.trace.step)
    np.testing.assert_allclose(steps, 2.0 / (np.arange(len(steps)) + 2))
    np.testing.assert_allclose(res.trace.gap, np.abs(np.subtract(res.trace.upper, res.trace.lower)))
    assert res.gain is not None
    assert check_achievability(res.maps, ops) <= 1e-7


def test_frank_wolfe_from_pole_placement(small, small_cfg):
    sys, ops, S = small
    a = frank_wolfe_solve(ops, S, small_cfg, init_strategy="pole_placement", sys=sys, recovery="iterate")
    b = frank_wolfe_solve(ops, S, small_cfg, recovery="iterate")
    assert a.status == b.status == "converged"
    assert a.value == pytest.approx(b.value, rel=2e-5)
