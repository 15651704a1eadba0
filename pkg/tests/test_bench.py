import math

import numpy as np
import pytest
from scipy import stats

from sinkdrse.bench import (
    DisturbanceModel,
    SweepConfig,
    case_study_system,
    monte_carlo_mse,
    reference_sigma,
    run_sweep,
    sample_disturbance,
    write_results,
)
from sinkdrse.drse import solve_h2
from sinkdrse.sls import ObserverGain, build_sls_operators, recover_gain


def test_case_study_matrices():
    sys = case_study_system(10)
    np.testing.assert_allclose(sys.A[0], [[0.9802, 0.0196], [0, 0.9802]])
    assert sys.A[3][0, 1] == pytest.approx(0.3166)
    np.testing.assert_allclose(sys.B[0] @ sys.B[0].T, [[1.9608, 0.0195], [0.0195, 1.9605]], atol=1e-12)
    assert not np.any(sys.B[0] @ sys.D[0].T)
    np.testing.assert_allclose(sys.D[0] @ sys.D[0].T, [[1.0]])
    assert sys.n_xi == 32
    with pytest.raises(ValueError):
        case_study_system(1)


def test_reference_sigma():
    sys = case_study_system(4)
    np.testing.assert_array_equal(reference_sigma(sys), np.eye(sys.n_xi))
    E = np.array([[2.0, 0.3], [0.3, 1.0]])
    S = reference_sigma(sys, E)
    assert np.linalg.det(S) == pytest.approx(np.linalg.det(E))


def test_mixture_variance():
    x = sample_disturbance(DisturbanceModel(), 1_000_000 // 4, 4, seed=0).samples.ravel()
    target = 0.5 * 0.2 + 0.5 * 0.31 ** 2 / 3
    assert abs(x.var() - target) <= 3 * np.std(x ** 2) / math.sqrt(x.size)


def test_pure_laplace_kurtosis():
    x = sample_disturbance(DisturbanceModel(weight=1.0), 200_000, 5, seed=1).samples.ravel()
    assert stats.kurtosis(x) == pytest.approx(3.0, abs=0.1)
    assert x.var() == pytest.approx(0.2, rel=0.01)


def test_sampler_reproducible_csv(tmp_path):
    a = sample_disturbance(DisturbanceModel(), 50, 6, seed=3)
    b = sample_disturbance(DisturbanceModel(), 50, 6, seed=3)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_custom_csv_resampling(tmp_path):
    pool = sample_disturbance(DisturbanceModel(), 5, 3, seed=0)
    pool.to_csv(tmp_path / "p.csv")
    s = sample_disturbance(DisturbanceModel(kind="custom_csv", path=str(tmp_path / "p.csv")), 20, 3, seed=1)
    assert all(any(np.array_equal(r, p) for p in pool.samples) for r in s.samples)


def test_model_validation():
    with pytest.raises(ValueError):
        DisturbanceModel(weight=1.5)
    with pytest.raises(ValueError):
        DisturbanceModel(kind="cauchy")


def test_mse_zero_disturbance():
    sys = case_study_system(4)
    ops = build_sls_operators(sys)
    mean, se = monte_carlo_mse(ObserverGain.zeros(ops), sys, DisturbanceModel(kind="gaussian", scale=0.0), 100, 0)
    assert mean == 0.0 and se == 0.0


def test_mse_gaussian_closed_form():
    sys = case_study_system(10)
    ops = build_sls_operators(sys)
    maps, v = solve_h2(ops, np.eye(ops.n_xi))
    mean, se = monte_carlo_mse(recover_gain(maps), sys, DisturbanceModel(kind="gaussian"), 20000, 7)
    assert abs(mean - v) <= 3 * se


@pytest.fixture(scope="module")
def sweep():
    cfg = SweepConfig(thetas=[0.5, 2.0, 10.0], epsilons=[1e-3, 1e3], T=3, N=15, seed=2, eval_runs=400)
    return cfg, run_sweep(cfg)


def test_sweep_structure(sweep, tmp_path):
    cfg, res = sweep
    methods = [r.method for r in res]
    assert methods.count("h2") == 1 and methods.count("wasserstein") == 3 and methods.count("sinkhorn") == 6
    from sinkdrse.ambiguity import SinkhornConfig, feasibility_threshold
    from sinkdrse.bench import sweep_data
    _, ops, S, Sig, _ = sweep_data(cfg)
    for r in res:
        if r.method == "sinkhorn":
            th0 = feasibility_threshold(S, SinkhornConfig(r.epsilon, 1.0, Sig))
            assert r.feasible == (r.theta > th0)
    write_results(res, tmp_path / "r.csv")
    head = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert head == "method,theta,epsilon,design_value,mse_mean,mse_stderr,feasible,wall_time_s"


def test_sweep_monotone_in_theta(sweep):
    _, res = sweep
    for method, eps in (("wasserstein", 0.0), ("sinkhorn", 1e-3)):
        v = [r.design_value for r in res if r.method == method and r.epsilon == eps and r.feasible]
        assert np.all(np.diff(v) >= -1e-6 * np.abs(v[:-1]))


def test_large_eps_design_value_approaches_h2():
    from sinkdrse.ambiguity import SinkhornConfig, h2_limit_threshold
    from sinkdrse.bench import sweep_data
    from sinkdrse.drse import frank_wolfe_solve
    cfg = SweepConfig(thetas=[1.0], epsilons=[1e3], T=3, N=15, seed=2, eval_runs=10)
    _, ops, S, Sig, _ = sweep_data(cfg)
    _, h2 = solve_h2(ops, Sig)
    base = SinkhornConfig(1e3, 1.0, Sig)
    thr = h2_limit_threshold(S, base)
    gaps = []
    for f in (1.2, 1.05, 1.001):
        r = frank_wolfe_solve(ops, S, base.replace(theta=f * thr), recovery="iterate")
        gaps.append((r.value - h2) / h2)
    assert gaps[0] > gaps[1] > gaps[2] > 0
    assert gaps[2] < 1e-2


def test_sweep_reproducible():
    cfg = SweepConfig(thetas=[1.0], epsilons=[1e-2], T=2, N=8, seed=5, eval_runs=100)
    a, b = run_sweep(cfg), run_sweep(cfg)
    assert [(r.design_value, r.mse_mean) for r in a] == [(r.design_value, r.mse_mean) for r in b]
