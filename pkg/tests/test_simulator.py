import numpy as np
import pytest

from spmap.config import default_config
from spmap.eval import ExperimentSetup
from spmap.simulator import (
    ASPHALT,
    PROPERTY,
    SEMANTIC,
    WATER,
    LateralProfile,
    MeasurementStream,
    SensorConfig,
    TrueMap,
    _draw_classes,
    generate_trajectory,
    generate_true_map,
    perturb_prior,
    synthesize_measurements,
)


@pytest.fixture(scope="module")
def setup(road):
    cfg = default_config()
    cfg["grid"]["s_max"] = 300.0
    return ExperimentSetup.from_config(cfg, spline=road)


@pytest.fixture(scope="module")
def short_stream(setup):
    tm = generate_true_map(3, setup.grid, setup.kernel, setup.layout, setup.props)
    traj = generate_trajectory(setup.spline, 15.0, LateralProfile("sine", 2.0, 150.0), 40.0, 12.0)
    return tm, traj, synthesize_measurements(tm, traj, setup.rig, setup.sensors, seed=3)


def test_true_map_deterministic(setup):
    a = generate_true_map(5, setup.grid, setup.kernel, setup.layout, setup.props)
    b = generate_true_map(5, setup.grid, setup.kernel, setup.layout, setup.props)
    c = generate_true_map(6, setup.grid, setup.kernel, setup.layout, setup.props)
    for name in ("w", "m", "tau", "dominant"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(a.params.dirichlet, b.params.dirichlet)
    assert not np.array_equal(a.w, c.w)


def test_true_map_structure(setup):
    tm = generate_true_map(1, setup.grid, setup.kernel, setup.layout, setup.props)
    np.testing.assert_allclose(tm.w.sum(axis=1), 1.0, atol=1e-12)
    assert tm.w.shape == (len(setup.grid), 3) and tm.m.shape == (3,)
    e = setup.grid.points[:, 1]
    assert np.all(tm.dominant[np.abs(e) >= setup.layout.gravel_e] != ASPHALT)
    road = (np.abs(e) < setup.layout.gravel_e) & (tm.dominant != WATER)
    assert np.all(tm.dominant[road] == ASPHALT)
    assert np.all(tm.params.dirichlet[np.arange(len(e)), tm.dominant] == setup.layout.concentration)


def test_no_water_at_zero_intensity(setup):
    from dataclasses import replace

    layout = replace(setup.layout, water_intensity=0.0)
    for seed in range(3):
        tm = generate_true_map(seed, setup.grid, setup.kernel, layout, setup.props)
        assert not np.any(tm.dominant == WATER)


def test_water_fraction_over_seeds(setup):
    fr = [generate_true_map(s, setup.grid, setup.kernel, setup.layout, setup.props).water_fraction()
          for s in range(10)]
    assert 0.02 <= np.mean(fr) <= 0.20


def test_forced_patch(setup):
    from dataclasses import replace

    layout = replace(setup.layout, water_intensity=0.0, water_patches=((100.0, 0.0, 6.0),))
    tm = generate_true_map(0, setup.grid, setup.kernel, layout, setup.props)
    near = setup.grid.distance(setup.grid.points, np.array([100.0, 0.0])) < 6.0
    assert np.all(tm.dominant[near] == WATER) and not np.any(tm.dominant[~near] == WATER)


def test_perturbed_prior(setup):
    tm = generate_true_map(2, setup.grid, setup.kernel, setup.layout, setup.props)
    P = perturb_prior(tm, 2, 0.9, (1.0, 5.0, 1.0))
    np.testing.assert_array_equal(P.dirichlet, np.tile([1.0, 5.0, 1.0], (len(setup.grid), 1)))
    for name in ("mu", "lam", "alpha", "beta"):
        ratio = getattr(P, name) / getattr(tm.params, name)
        assert np.all((ratio >= 0.1) & (ratio <= 1.9))
    P2 = perturb_prior(tm, 2, 0.9, (1.0, 5.0, 1.0))
    np.testing.assert_array_equal(P.mu, P2.mu)
    P0 = perturb_prior(tm, 2, 0.0)
    np.testing.assert_array_equal(P0.mu, tm.params.mu)
    with pytest.raises(ValueError):
        perturb_prior(tm, 2, 1.0)


def test_true_map_serialization(setup):
    tm = generate_true_map(4, setup.grid, setup.kernel, setup.layout, setup.props)
    back = TrueMap.from_dict(tm.to_dict())
    for name in ("w", "m", "tau", "dominant"):
        np.testing.assert_array_equal(getattr(back, name), getattr(tm, name))
    np.testing.assert_array_equal(back.grid.points, tm.grid.points)


# -- trajectories -----------------------------------------------------------------


def test_trajectory_span(road):
    traj = generate_trajectory(road, 15.0, LateralProfile(), 40.0, 40.0)
    st = traj.states()
    assert traj.at(np.array([40.0])).s[0] == pytest.approx(600.0)
    assert np.all(st.e == 0) and np.all(np.diff(st.t) > 0) and np.all(np.diff(st.s) >= 0)
    assert len(st.t) == 1600


def test_trajectory_sine_amplitude(road):
    traj = generate_trajectory(road, 15.0, LateralProfile("sine", 2.0, 150.0), 40.0, 40.0)
    st = traj.states()
    assert np.max(np.abs(st.e)) == pytest.approx(2.0, abs=1e-3)
    s, e, _ = road.project_points(np.column_stack([st.x, st.y]))
    np.testing.assert_allclose(e, st.e, atol=1e-6)
    np.testing.assert_allclose(s, st.s, atol=1e-6)


def test_trajectory_heading_follows_motion(road):
    traj = generate_trajectory(road, 15.0, LateralProfile("sine", 3.0, 100.0), 40.0, 20.0)
    t = np.linspace(0.5, 19.5, 50)
    a, b = traj.at(t - 1e-4), traj.at(t + 1e-4)
    fd = np.arctan2(b.y - a.y, b.x - a.x)
    h = traj.at(t).heading
    np.testing.assert_allclose(np.angle(np.exp(1j * (fd - h))), 0.0, atol=1e-6)


def test_trajectory_errors(road):
    with pytest.raises(ValueError):
        generate_trajectory(road, 15.0, LateralProfile("constant", 7.0), 40.0, 10.0, e_max=6.0)
    with pytest.raises(ValueError):
        generate_trajectory(road, 15.0, LateralProfile(), 40.0, 1000.0)
    with pytest.raises(ValueError):
        generate_trajectory(road, -1.0)
    with pytest.raises(ValueError):
        LateralProfile("zigzag")


# -- streams ------------------------------------------------------------------------


def test_stream_sorted_and_in_corridor(short_stream, setup):
    _, _, stream = short_stream
    assert np.all(np.diff(stream.t) >= 0)
    assert np.all(np.abs(stream.e) <= setup.sensors.e_max)
    sem = stream.select(SEMANTIC)
    assert set(np.unique(sem.value)) <= {0.0, 1.0, 2.0}
    assert len(stream.select(PROPERTY)) == 480


def test_stream_rates(short_stream):
    _, _, stream = short_stream
    for kind, rate in ((SEMANTIC, 20), (PROPERTY, 40)):
        ts = np.unique(stream.select(kind).t)
        for a in np.arange(0.0, 2.0, 0.25):
            n = np.sum((ts >= a) & (ts < a + 10.0))
            assert abs(n - rate * 10) <= 1


def test_stream_deterministic(short_stream, setup):
    tm, traj, stream = short_stream
    again = synthesize_measurements(tm, traj, setup.rig, setup.sensors, seed=3)
    for name in ("t", "kind", "s", "e", "value"):
        np.testing.assert_array_equal(getattr(again, name), getattr(stream, name))
    assert again.dropped == stream.dropped


def test_stream_jsonl_roundtrip(short_stream, tmp_path):
    _, _, stream = short_stream
    stream.to_jsonl(tmp_path / "s.jsonl")
    back = MeasurementStream.from_jsonl(tmp_path / "s.jsonl")
    for name in ("t", "kind", "s", "e", "value"):
        np.testing.assert_array_equal(getattr(back, name), getattr(stream, name))
    assert back.dropped == stream.dropped and back.meta["seed"] == 3
    lines = (tmp_path / "s.jsonl").read_text().splitlines()
    lines[5] = '{"type": "semantic", "t": 0.0}'
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="bad.jsonl:6"):
        MeasurementStream.from_jsonl(tmp_path / "bad.jsonl")


def test_runs_group_frames(short_stream):
    _, _, stream = short_stream
    total = 0
    for kind, sl in stream.runs():
        assert np.all(stream.kind[sl] == kind) and np.all(stream.t[sl] == stream.t[sl.start])
        total += sl.stop - sl.start
    assert total == len(stream)


def _degenerate_map(setup):
    tm = generate_true_map(7, setup.grid, setup.kernel, setup.layout, setup.props)
    w = np.zeros_like(tm.w)
    w[np.arange(len(w)), tm.dominant] = 1.0
    return TrueMap(tm.params, w, tm.m, np.full(3, np.inf), tm.grid, tm.kernel, tm.dominant)


def test_degenerate_world_is_exact(setup):
    tm = _degenerate_map(setup)
    traj = generate_trajectory(setup.spline, 15.0, LateralProfile("sine", 2.0, 150.0), 40.0, 6.0)
    stream = synthesize_measurements(tm, traj, setup.rig, setup.sensors, seed=1)
    sem = stream.select(SEMANTIC)
    p = tm.class_probs(np.column_stack([sem.s, sem.e]))
    pure = p.max(axis=1) == 1.0
    assert pure.sum() > 1000
    np.testing.assert_array_equal(sem.value[pure], p[pure].argmax(axis=1))
    assert np.all(p[np.arange(len(p)), sem.value.astype(int)] > 0)
    prop = stream.select(PROPERTY)
    assert np.all(np.isin(prop.value, tm.m))


def test_class_frequencies_match_weights():
    rng = np.random.default_rng(0)
    w = np.array([0.15, 0.6, 0.25])
    n = 10_000
    draws = _draw_classes(rng, np.tile(w, (n, 1)))
    for k in range(3):
        f = np.mean(draws == k)
        assert abs(f - w[k]) <= 3 * np.sqrt(w[k] * (1 - w[k]) / n)


def test_property_moments_at_fixed_location(setup):
    tm = generate_true_map(8, setup.grid, setup.kernel, setup.layout, setup.props)
    n = 10_000
    # crawl so slowly that every tick samples the same kernel neighbourhood
    traj = generate_trajectory(setup.spline, 1e-7, LateralProfile("constant", 1.3), 40.0, n / 40.0, s_start=50.3)
    sensors = SensorConfig(semantic_rate=1e-3, pixels_per_frame=1)
    stream = synthesize_measurements(tm, traj, setup.rig, sensors, seed=8).select(PROPERTY)
    assert len(stream) == n
    p = tm.class_probs(np.array([[50.3, 1.3]]))[0]
    mean = p @ tm.m
    var = p @ (1.0 / tm.tau + tm.m**2) - mean**2
    y = stream.value
    assert abs(y.mean() - mean) <= 3 * np.sqrt(var / n)
    m4 = p @ (3 / tm.tau**2 + 6 * tm.m**2 / tm.tau + tm.m**4)
    m2 = var + mean**2
    assert abs(np.mean(y**2) - m2) <= 3 * np.sqrt((m4 - m2**2) / n)
