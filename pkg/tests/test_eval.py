import math

import numpy as np
import pytest
from scipy.integrate import quad

from spmap.config import default_config
from spmap.errors import EvaluationError
from spmap.eval import (
    ExperimentSetup,
    KlTrace,
    apply_stream,
    convergence_seed,
    horizon_points,
    horizon_seed,
    kl_gauss,
    kl_moments,
    kl_predictive_optional,
    load_waypoints,
    summarize,
    write_horizon_outputs,
    write_kl_outputs,
)
from spmap.kernels import SparseKernelConfig, SupportGrid
from spmap.simulator import generate_true_map
from spmap.spm import SemanticPropertyMap, SpmParams


def kl_quadrature(m1, v1, m2, v2):
    def integrand(x):
        lp = -0.5 * math.log(2 * math.pi * v1) - (x - m1) ** 2 / (2 * v1)
        lq = -0.5 * math.log(2 * math.pi * v2) - (x - m2) ** 2 / (2 * v2)
        return math.exp(lp) * (lp - lq)

    sd = math.sqrt(v1)
    val, _ = quad(integrand, m1 - 40 * sd, m1 + 40 * sd, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


@pytest.fixture(scope="module")
def small_setup(road):
    cfg = default_config()
    cfg["grid"]["s_max"] = 200.0
    cfg["simulator"]["distance"] = 60.0
    cfg["simulator"]["seeds"] = [0, 1]
    cfg["eval"]["horizon"]["s0"] = 100.0
    return ExperimentSetup.from_config(cfg, spline=road)


def test_kl_gauss_closed_form_and_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m1, m2 = rng.normal(0, 1, 2)
        v1, v2 = rng.uniform(0.05, 3, 2)
        assert kl_gauss(m1, v1, m2, v2) == pytest.approx(kl_quadrature(m1, v1, m2, v2), abs=1e-6)
    assert kl_gauss(0.3, 0.2, 0.3, 0.2) == 0.0
    with pytest.raises(EvaluationError):
        kl_gauss(0.0, 0.0, 0.0, 1.0)


def _one_class(grid, mu):
    return SpmParams.uniform(len(grid), [1.0], [mu], [2.0], [3.0], [0.1])


def test_kl_moments_examples():
    grid = SupportGrid.regular(0, 20, -2, 2, 1.0, 1.0, radius=3.0)
    cfg = SparseKernelConfig()
    P = _one_class(grid, 0.5)
    assert kl_moments(P, P.copy(), grid, cfg) == 0.0
    delta = 0.07
    var = 0.1 / 2 * 3 / 2
    assert kl_moments(P, _one_class(grid, 0.5 + delta), grid, cfg) == pytest.approx(delta**2 / (2 * var), rel=1e-12)
    with pytest.raises(EvaluationError):
        kl_moments(P, SpmParams.uniform(3, [1.0], [0.5], [2.0], [3.0], [0.1]), grid, cfg)


def test_kl_random_pair_matches_quadrature():
    grid = SupportGrid.regular(0, 6, -1, 1, 1.0, 1.0, radius=3.0)
    cfg = SparseKernelConfig()
    rng = np.random.default_rng(1)
    A = SpmParams(rng.uniform(0.5, 5, (len(grid), 3)), [0.3, 0.6, 0.9], [2, 3, 4], [3, 4, 5], [0.05, 0.1, 0.2])
    B = SpmParams(rng.uniform(0.5, 5, (len(grid), 3)), [0.4, 0.5, 0.8], [1, 3, 2], [4, 3, 6], [0.1, 0.1, 0.1])
    from spmap.spm import predict_moments

    ref = np.mean([kl_quadrature(*predict_moments(A, v, grid, cfg), *predict_moments(B, v, grid, cfg))
                   for v in grid.points])
    assert kl_moments(A, B, grid, cfg) == pytest.approx(ref, abs=1e-6)
    assert kl_predictive_optional(A, B, grid, cfg) == pytest.approx(kl_moments(A, B, grid, cfg), rel=1e-14)
    assert kl_predictive_optional(A, A, grid, cfg) == 0.0
    q = np.array([[2.5, 0.3]])
    spot = kl_quadrature(*predict_moments(A, q[0], grid, cfg), *predict_moments(B, q[0], grid, cfg))
    assert kl_predictive_optional(A, B, grid, cfg, points=q) == pytest.approx(spot, abs=1e-6)


def test_kl_invariant_to_support_order():
    grid = SupportGrid.regular(0, 10, -2, 2, 1.0, 1.0, radius=3.0)
    cfg = SparseKernelConfig()
    rng = np.random.default_rng(2)
    A = SpmParams(rng.uniform(0.5, 5, (len(grid), 3)), [0.3, 0.6, 0.9], [2, 3, 4], [3, 4, 5], [0.05, 0.1, 0.2])
    B = SpmParams(rng.uniform(0.5, 5, (len(grid), 3)), [0.4, 0.5, 0.8], [1, 3, 2], [4, 3, 6], [0.1, 0.1, 0.1])
    perm = rng.permutation(len(grid))
    g2 = SupportGrid(grid.points[perm], radius=3.0)

    def permuted(P):
        return SpmParams(P.dirichlet[perm], P.mu, P.lam, P.alpha, P.beta)

    assert kl_moments(permuted(A), permuted(B), g2, cfg) == pytest.approx(kl_moments(A, B, grid, cfg), rel=1e-12)


def test_horizon_points_shape():
    V = horizon_points(300.0)
    assert V.shape == (80, 2)
    np.testing.assert_allclose(V[:, 0], 300.0 + np.arange(1, 81))
    assert np.max(np.abs(V[:, 1])) == pytest.approx(3.5)
    np.testing.assert_allclose(V[20:, 1], V[:-20, 1], atol=1e-12)
    assert V[9, 1] == pytest.approx(-3.5)


def test_zero_measurements_trace_constant(small_setup):
    tr = convergence_seed(small_setup, 0, with_measurements=False)
    assert np.all(tr.kl == tr.kl[0]) and tr.kl[0] > 0
    assert len(tr.s) == 7


def test_convergence_seed_reproducible(small_setup):
    a = convergence_seed(small_setup, 1)
    b = convergence_seed(small_setup, 1)
    np.testing.assert_array_equal(a.kl, b.kl)
    assert np.all(a.kl >= 0)


def test_summary_ci():
    traces = [KlTrace(i, np.array([0.0, 10.0]), np.array([1.0 + i, 0.5])) for i in range(4)]
    s = summarize(traces)
    np.testing.assert_allclose(s.mean, [2.5, 0.5])
    half = 1.959963984540054 * np.std([1, 2, 3, 4], ddof=1) / 2
    np.testing.assert_allclose(s.ci_hi - s.mean, [half, 0.0])


def test_apply_stream_stop(small_setup):
    from spmap.simulator import LateralProfile, generate_trajectory, perturb_prior, synthesize_measurements

    tm = generate_true_map(0, small_setup.grid, small_setup.kernel, small_setup.layout, small_setup.props)
    traj = generate_trajectory(small_setup.spline, 15.0, LateralProfile(), 40.0, 2.0)
    stream = synthesize_measurements(tm, traj, small_setup.rig, small_setup.sensors, 0)
    smap = SemanticPropertyMap(perturb_prior(tm, 0), small_setup.grid, small_setup.kernel)
    seen = []
    idx = apply_stream(smap, stream, on_property=lambda y, s, e: seen.append(y), stop=1.0)
    assert np.all(stream.t[:idx] < 1.0) and np.all(stream.t[idx:] >= 1.0)
    assert len(seen) == 40 and smap.stats.property == 40


def test_horizon_seed_outputs(small_setup, tmp_path):
    res = horizon_seed(small_setup, 0, "patch")
    assert len(res.n) == 80
    for arr in (res.true, res.spm, res.kf, res.gp):
        assert arr.shape == (80,) and np.all(np.isfinite(arr))
    assert np.all(res.kf == res.kf[0])
    np.testing.assert_allclose(res.class_probs.sum(axis=1), 1.0, atol=1e-12)
    assert set(res.rmse()) == {"spm", "kf", "gp"}
    paths = write_horizon_outputs([res], tmp_path)
    text = paths[0].read_bytes()
    assert b"\r" not in text
    lines = text.decode("utf-8").splitlines()
    assert lines[0] == "n,s,e,true,spm,kf,gp" and len(lines) == 81
    assert paths[1].read_text().splitlines()[0] == "s,e,p1,p2,p3"


def test_horizon_constant_truth(small_setup):
    res = horizon_seed(small_setup, 1, "constant")
    np.testing.assert_allclose(res.true, 0.7, rtol=1e-12)
    with pytest.raises(ValueError):
        horizon_seed(small_setup, 1, "bogus")


def test_kl_outputs(tmp_path):
    traces = [KlTrace(i, np.array([0.0, 10.0]), np.array([1.0, 0.5])) for i in range(2)]
    paths = write_kl_outputs(summarize(traces), tmp_path)
    assert paths[0].read_text().splitlines()[0] == "seed,s,kl"
    assert len(paths[0].read_text().splitlines()) == 5
    assert paths[1].read_text().splitlines()[0] == "s,mean,ci_lo,ci_hi"


def test_load_waypoints_errors(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("# x,y\n0,0\n1,1\n2,oops\n")
    with pytest.raises(ValueError, match="w.csv:4"):
        load_waypoints(p)
    p.write_text("0 0\n1, 2\n")
    np.testing.assert_array_equal(load_waypoints(p), [[0, 0], [1, 2]])
