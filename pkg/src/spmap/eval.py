"""Map-quality metrics and the two experiments.

* Convergence: KL divergence between the moment fields of the true and the
  estimated map, traced against distance driven over several seeds.
* Horizon: property prediction along a weaving horizon ahead of the vehicle
  for the map, a random-walk Kalman filter and a windowed GP.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import GpWindow, KfState, gp_fit, gp_predict, kf_predict_horizon, kf_update
from .errors import EvaluationError, FitError
from .geometry import PathSpline, fit_path, synthetic_road
from .kernels import SparseKernelConfig, SupportGrid, interp_matrix
from .projection import CameraRig
from .simulator import (
    SEMANTIC,
    ClassProps,
    LateralProfile,
    MapLayout,
    MeasurementStream,
    SensorConfig,
    generate_trajectory,
    generate_true_map,
    perturb_prior,
    synthesize_measurements,
)
from .spm import (
    PropertyMeasurement,
    SemanticPropertyMap,
    SpmParams,
    predict_many,
)

Z95 = 1.959963984540054


# -- metrics -------------------------------------------------------------------


def kl_gauss(m1, v1, m2, v2) -> np.ndarray:
    """KL(N(m1, v1) || N(m2, v2)) elementwise, variances as inputs."""
    m1, v1, m2, v2 = (np.asarray(x, dtype=float) for x in (m1, v1, m2, v2))
    if np.any(~(v1 > 0)) or np.any(~(v2 > 0)):
        raise EvaluationError("KL divergence needs positive variances")
    return 0.5 * np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / (2.0 * v2) - 0.5


def support_weights(grid: SupportGrid, cfg: SparseKernelConfig):
    W, covered = interp_matrix(cfg, grid, grid.points)
    if not covered.all():
        raise EvaluationError("some support points lack kernel coverage")
    return W


def kl_moments(true_params: SpmParams, est_params: SpmParams, grid: SupportGrid, cfg: SparseKernelConfig,
               var_cap: float = 1.0, W=None) -> float:
    """Average over support points of the Gaussian KL between the two moment fields."""
    if true_params.L != est_params.L or true_params.L != len(grid):
        raise EvaluationError("maps must share the support layout")
    W = support_weights(grid, cfg) if W is None else W
    mt, vt, _ = predict_many(true_params, W, var_cap)
    me, ve, _ = predict_many(est_params, W, var_cap)
    return float(np.mean(kl_gauss(mt, vt, me, ve)))


def kl_predictive_optional(true_params: SpmParams, est_params: SpmParams, grid: SupportGrid,
                           cfg: SparseKernelConfig, points=None, var_cap: float = 1.0) -> float:
    """Likelihood-level KL averaged over arbitrary query ``points`` (default: support points).

    Each map's likelihood at a point is summarized by its own predictive mean
    and variance; at the support points this coincides with :func:`kl_moments`.
    """
    pts = grid.points if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    W, covered = interp_matrix(cfg, grid, pts)
    if not covered.all():
        raise EvaluationError("query points outside kernel coverage")
    mt, vt, _ = predict_many(true_params, W, var_cap)
    me, ve, _ = predict_many(est_params, W, var_cap)
    return float(np.mean(kl_gauss(mt, vt, me, ve)))


# -- setup -----------------------------------------------------------------------


@dataclass
class ExperimentSetup:
    spline: PathSpline
    grid: SupportGrid
    kernel: SparseKernelConfig
    rig: CameraRig
    sensors: SensorConfig
    speed: float
    distance: float
    profile: LateralProfile
    layout: MapLayout
    props: ClassProps
    seeds: tuple
    prior_magnitude: float = 0.9
    prior_a: tuple = (1.0, 5.0, 1.0)
    var_cap: float = 1.0
    kl_every: float = 10.0
    kf: dict | None = None
    gp: dict | None = None
    horizon: dict | None = None

    @classmethod
    def from_config(cls, cfg: dict, spline: PathSpline | None = None) -> "ExperimentSetup":
        road, g, sim = cfg["road"], cfg["grid"], cfg["simulator"]
        if spline is None:
            spline = build_spline(road)
        kernel = SparseKernelConfig(**cfg["kernel"])
        period = spline.length if spline.closed else None
        grid = SupportGrid.regular(g["s_min"], g["s_max"], -g["e_max"], g["e_max"], g["spacing_s"],
                                   g["spacing_e"], kernel.D, closed=spline.closed, period=period)
        sensors = SensorConfig(sim["semantic_rate"], sim["property_rate"], int(sim["pixels_per_frame"]),
                               near=sim["near"], far=sim["far"], e_max=g["e_max"])
        lat = sim["lateral"]
        f = sim["field"]
        c = sim["classes"]
        return cls(
            spline=spline,
            grid=grid,
            kernel=kernel,
            rig=CameraRig.from_config(cfg["camera"]),
            sensors=sensors,
            speed=sim["speed"],
            distance=sim["distance"],
            profile=LateralProfile(lat["kind"], lat["amplitude"], lat["wavelength"]),
            layout=MapLayout(f["gravel_e"], f["water_intensity"], f["length_s"], f["length_e"], f["concentration"]),
            props=ClassProps(tuple(c["mu"]), tuple(c["lam"]), tuple(c["alpha"]), tuple(c["noise_sd"])),
            seeds=tuple(int(s) for s in sim["seeds"]),
            prior_magnitude=cfg["prior"]["magnitude"],
            prior_a=tuple(cfg["prior"]["a"]),
            var_cap=cfg["prior"]["var_cap"],
            kl_every=cfg["eval"]["kl_every"],
            kf=dict(cfg["baselines"]["kf"]),
            gp=dict(cfg["baselines"]["gp"]),
            horizon=dict(cfg["eval"]["horizon"]),
        )


def build_spline(road: dict) -> PathSpline:
    if road.get("waypoints"):
        wp = load_waypoints(road["waypoints"])
    else:
        wp = synthetic_road(road["length"], road["spacing"])
    return fit_path(wp, int(road["M"]), int(road["degree"]), closed=bool(road["closed"]))


def load_waypoints(path) -> np.ndarray:
    """Read ``x,y`` (or whitespace separated) waypoint rows; comments start with '#'."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.replace(",", " ").split()
            try:
                if len(parts) != 2:
                    raise ValueError(f"expected 2 columns, got {len(parts)}")
                rows.append([float(parts[0]), float(parts[1])])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed waypoint ({exc})") from exc
    if not rows:
        raise ValueError(f"{path}: no waypoints")
    return np.array(rows)


def apply_stream(smap: SemanticPropertyMap, stream: MeasurementStream, on_property=None, stop=None):
    """Feed a stream into the map in order, batching each frame's semantics.

    ``on_property(y, s, e)`` is called for every property record; ``stop`` is
    an optional time; records at or after it are left unconsumed.  Returns the index of the
    first unconsumed record.
    """
    for kind, sl in stream.runs():
        if stop is not None and stream.t[sl.start] >= stop:
            return sl.start
        if kind == SEMANTIC:
            locs = np.column_stack([stream.s[sl], stream.e[sl]])
            smap.add_semantic_batch(stream.value[sl].astype(int), locs)
        else:
            for i in range(sl.start, sl.stop):
                smap.add_property(PropertyMeasurement(stream.value[i], stream.s[i], stream.e[i]))
                if on_property is not None:
                    on_property(stream.value[i], stream.s[i], stream.e[i])
    return len(stream)


# -- convergence experiment ----------------------------------------------------------


@dataclass
class KlTrace:
    seed: int
    s: np.ndarray
    kl: np.ndarray


@dataclass
class KlSummary:
    s: np.ndarray
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    traces: list

    def window_means(self, width: float = 100.0) -> np.ndarray:
        """Mean of the trace mean over consecutive windows of ``width`` meters."""
        edges = np.arange(self.s[0], self.s[-1] + 1e-9, width)
        return np.array([self.mean[(self.s >= a) & (self.s < a + width)].mean() for a in edges[:-1]])


def summarize(traces: list[KlTrace]) -> KlSummary:
    K = np.vstack([t.kl for t in traces])
    mean = K.mean(axis=0)
    half = Z95 * K.std(axis=0, ddof=1) / np.sqrt(len(traces)) if len(traces) > 1 else np.zeros_like(mean)
    return KlSummary(traces[0].s, mean, mean - half, mean + half, traces)


def convergence_seed(setup: ExperimentSetup, seed: int, with_measurements: bool = True) -> KlTrace:
    true_map = generate_true_map(seed, setup.grid, setup.kernel, setup.layout, setup.props)
    prior = perturb_prior(true_map, seed, setup.prior_magnitude, setup.prior_a)
    smap = SemanticPropertyMap(prior, setup.grid, setup.kernel, var_cap=setup.var_cap)
    W = support_weights(setup.grid, setup.kernel)
    checkpoints = np.arange(0.0, setup.distance + 1e-9, setup.kl_every)
    kl = np.empty(len(checkpoints))
    if not with_measurements:
        kl[:] = kl_moments(true_map.params, smap.params, setup.grid, setup.kernel, setup.var_cap, W)
        return KlTrace(seed, checkpoints, kl)
    traj = generate_trajectory(setup.spline, setup.speed, setup.profile, setup.sensors.property_rate,
                               setup.distance / setup.speed, e_max=setup.sensors.e_max)
    stream = synthesize_measurements(true_map, traj, setup.rig, setup.sensors, seed)
    start = 0
    for k, d in enumerate(checkpoints):
        t_stop = d / setup.speed
        sub = _slice_stream(stream, start)
        consumed = apply_stream(smap, sub, stop=t_stop) if len(sub) else 0
        start += consumed
        kl[k] = kl_moments(true_map.params, smap.params, setup.grid, setup.kernel, setup.var_cap, W)
    return KlTrace(seed, checkpoints, kl)


def _slice_stream(stream: MeasurementStream, start: int) -> MeasurementStream:
    sl = slice(start, None)
    return MeasurementStream(stream.t[sl], stream.kind[sl], stream.s[sl], stream.e[sl], stream.value[sl])


def _map_seeds(fn, args, jobs: int):
    if jobs <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*args)))


def run_convergence_experiment(setup: ExperimentSetup, jobs: int = 1, with_measurements: bool = True) -> KlSummary:
    traces = _map_seeds(convergence_seed, [(setup, s, with_measurements) for s in setup.seeds], jobs)
    return summarize(traces)


# -- horizon experiment --------------------------------------------------------------


@dataclass
class HorizonResult:
    seed: int
    n: np.ndarray
    s: np.ndarray
    e: np.ndarray
    true: np.ndarray
    spm: np.ndarray
    kf: np.ndarray
    gp: np.ndarray
    class_probs: np.ndarray

    def rmse(self) -> dict:
        return {k: float(np.sqrt(np.mean((getattr(self, k) - self.true) ** 2))) for k in ("spm", "kf", "gp")}


def horizon_points(s0: float, n: int = 80, amplitude: float = 3.5) -> np.ndarray:
    """Horizon ``(s0 + k, amplitude * cos(pi/10 * k))`` for ``k = 1..n``."""
    k = np.arange(1, n + 1, dtype=float)
    return np.column_stack([s0 + k, amplitude * np.cos(np.pi / 10.0 * k)])


def horizon_seed(setup: ExperimentSetup, seed: int, scenario: str | None = None) -> HorizonResult:
    h = setup.horizon
    scenario = scenario or h["scenario"]
    s0, n = float(h["s0"]), int(h["n"])
    V = horizon_points(s0, n, h["amplitude"])
    if np.any(np.abs(V[:, 1]) > setup.sensors.e_max):
        raise EvaluationError("horizon leaves the corridor")
    layout, props = setup.layout, setup.props
    if scenario == "patch":
        layout = replace(layout, water_patches=((s0 + h["patch_offset"], 0.0, h["patch_radius"]),))
    elif scenario == "constant":
        props = replace(props, mu=(float(h["constant_value"]),) * props.K)
    else:
        raise ValueError(f"unknown horizon scenario {scenario!r}")
    true_map = generate_true_map(seed, setup.grid, setup.kernel, layout, props)
    if scenario == "constant":
        true_map.m[:] = float(h["constant_value"])
    prior = perturb_prior(true_map, seed, setup.prior_magnitude, setup.prior_a)
    smap = SemanticPropertyMap(prior, setup.grid, setup.kernel, var_cap=setup.var_cap)

    traj = generate_trajectory(setup.spline, setup.speed, setup.profile, setup.sensors.property_rate,
                               s0 / setup.speed, e_max=setup.sensors.e_max)
    stream = synthesize_measurements(true_map, traj, setup.rig, setup.sensors, seed)
    kf_cfg = setup.kf
    kf = [KfState(float(np.mean(prior.mu)), kf_cfg["variance0"], kf_cfg["q"], kf_cfg["r"])]
    window = GpWindow(setup.gp["span"], int(setup.gp["cap"]))

    def on_property(y, s, e):
        kf[0] = kf_update(kf[0], y)
        window.add(y, s, e)

    apply_stream(smap, stream, on_property=on_property)

    W, covered = interp_matrix(setup.kernel, setup.grid, V)
    if not covered.all():
        raise EvaluationError("horizon outside map support")
    m_spm, _, probs = predict_many(smap.params, W, setup.var_cap)
    kf_mean, _ = kf_predict_horizon(kf[0], n)
    try:
        hyper = gp_fit(window, starts=int(setup.gp["starts"]), maxiter=int(setup.gp["maxiter"]))
        gp_mean = gp_predict(window, hyper, V)
    except FitError:
        X, y = window.arrays()
        gp_mean = np.full(n, y.mean() if len(y) else kf[0].mean)
    truth = true_map.property_mean(V)
    return HorizonResult(seed, np.arange(1, n + 1), V[:, 0], V[:, 1], truth, m_spm, kf_mean, gp_mean, probs)


def run_horizon_experiment(setup: ExperimentSetup, jobs: int = 1, scenario: str | None = None) -> list[HorizonResult]:
    return _map_seeds(horizon_seed, [(setup, s, scenario) for s in setup.seeds], jobs)


# -- outputs -------------------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_kl_outputs(summary: KlSummary, out_dir) -> list[Path]:
    out = Path(out_dir)
    trace_rows = [(t.seed, repr(float(s)), repr(float(k))) for t in summary.traces for s, k in zip(t.s, t.kl)]
    _write_csv(out / "kl_trace.csv", ("seed", "s", "kl"), trace_rows)
    rows = [tuple(repr(float(x)) for x in r) for r in zip(summary.s, summary.mean, summary.ci_lo, summary.ci_hi)]
    _write_csv(out / "kl_summary.csv", ("s", "mean", "ci_lo", "ci_hi"), rows)
    return [out / "kl_trace.csv", out / "kl_summary.csv"]


def write_horizon_outputs(results: list[HorizonResult], out_dir) -> list[Path]:
    """``horizon.csv`` and ``class_likelihoods.csv`` for the first seed plus an RMSE table."""
    out = Path(out_dir)
    r = results[0]
    K = r.class_probs.shape[1]
    _write_csv(out / "horizon.csv", ("n", "s", "e", "true", "spm", "kf", "gp"),
               [(int(n), *(repr(float(x)) for x in row))
                for n, *row in zip(r.n, r.s, r.e, r.true, r.spm, r.kf, r.gp)])
    _write_csv(out / "class_likelihoods.csv", ("s", "e", *(f"p{i + 1}" for i in range(K))),
               [tuple(repr(float(x)) for x in (s, e, *p)) for s, e, p in zip(r.s, r.e, r.class_probs)])
    _write_csv(out / "horizon_rmse.csv", ("seed", "spm", "kf", "gp"),
               [(res.seed, *(repr(v) for v in res.rmse().values())) for res in results])
    return [out / "horizon.csv", out / "class_likelihoods.csv", out / "horizon_rmse.csv"]
