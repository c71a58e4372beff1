"""Synthetic true maps, trajectories and measurement streams.

Classes are indexed gravel=0, asphalt=1, water=2 internally (1, 2, 3 in
stream files).  All randomness flows from one integer seed through
:class:`numpy.random.SeedSequence` children, so every artifact is
reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .geometry import OK as PROJ_OK
from .geometry import PathSpline
from .kernels import SparseKernelConfig, SupportGrid, interp_matrix
from .projection import OK as IPM_OK
from .projection import CameraRig, ipm_project_batch, project_to_image
from .spm import SpmParams

GRAVEL, ASPHALT, WATER = 0, 1, 2
CLASS_NAMES = ("gravel", "asphalt", "water")

SEMANTIC = 0
PROPERTY = 1


@dataclass(frozen=True)
class ClassProps:
    """True normal-gamma hyperparameters per class; ``beta = alpha * noise_sd**2``."""

    mu: tuple = (0.55, 0.9, 0.35)
    lam: tuple = (25.0, 25.0, 25.0)
    alpha: tuple = (50.0, 50.0, 50.0)
    noise_sd: tuple = (0.02, 0.02, 0.02)

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.alpha) * np.asarray(self.noise_sd) ** 2

    @property
    def K(self) -> int:
        return len(self.mu)


@dataclass(frozen=True)
class MapLayout:
    """Spatial composition of a true map.

    ``water_patches`` lists forced circular patches ``(s, e, radius)`` on top
    of the thresholded random field.
    """

    gravel_e: float = 4.5
    water_intensity: float = 0.08
    length_s: float = 30.0
    length_e: float = 2.0
    concentration: float = 50.0
    background: float = 1.0
    water_patches: tuple = ()


@dataclass
class TrueMap:
    params: SpmParams
    w: np.ndarray
    m: np.ndarray
    tau: np.ndarray
    grid: SupportGrid
    kernel: SparseKernelConfig
    dominant: np.ndarray

    @property
    def K(self) -> int:
        return self.params.K

    def class_probs(self, v) -> np.ndarray:
        """Interpolated latent class weights at locations ``v`` (n, 2); NaN where uncovered."""
        W, covered = interp_matrix(self.kernel, self.grid, v)
        p = W @ self.w
        p[~covered] = np.nan
        return p

    def property_mean(self, v) -> np.ndarray:
        """Latent mixture mean of the property at ``v``."""
        return self.class_probs(v) @ self.m

    def water_fraction(self) -> float:
        return float(np.mean(self.dominant == WATER))

    def to_dict(self) -> dict:
        from .spm import SemanticPropertyMap

        doc = SemanticPropertyMap(self.params, self.grid, self.kernel).to_dict()
        doc["theta"] = {"w": self.w.tolist(), "m": self.m.tolist(), "tau": self.tau.tolist(),
                        "dominant": self.dominant.tolist()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrueMap":
        from .spm import SemanticPropertyMap

        smap = SemanticPropertyMap.from_dict(doc)
        th = doc["theta"]
        return cls(smap.params, np.array(th["w"]), np.array(th["m"]), np.array(th["tau"]),
                   smap.grid, smap.kernel, np.array(th["dominant"], dtype=int))


def _se_sqrt(x: np.ndarray, scale: float, period: float | None = None) -> np.ndarray:
    """Symmetric square root of a squared-exponential covariance on 1-d inputs."""
    d = x[:, None] - x[None, :]
    if period is not None:
        d = period / np.pi * np.sin(np.pi * d / period)
    C = np.exp(-0.5 * (d / scale) ** 2)
    vals, vecs = np.linalg.eigh(C)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_field(rng: np.random.Generator, grid: SupportGrid, length_s: float, length_e: float) -> np.ndarray:
    """Unit-variance stationary GP draw at the support points (separable SE covariance)."""
    period = grid.period if grid.closed else None
    if grid.lattice is not None:
        A_s = _se_sqrt(grid.s_values, length_s, period)
        A_e = _se_sqrt(grid.e_values, length_e)
        Z = rng.standard_normal((len(A_s), len(A_e)))
        return (A_s @ Z @ A_e.T).ravel()
    if len(grid) > 4000:
        raise ValueError("dense field sampling is limited to 4000 scattered support points")
    pts = grid.points
    ds = pts[:, None, 0] - pts[None, :, 0]
    if period is not None:
        ds = period / np.pi * np.sin(np.pi * ds / period)
    de = pts[:, None, 1] - pts[None, :, 1]
    C = np.exp(-0.5 * ((ds / length_s) ** 2 + (de / length_e) ** 2))
    vals, vecs = np.linalg.eigh(C)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ rng.standard_normal(len(grid))


def generate_true_map(
    seed: int,
    grid: SupportGrid,
    kernel: SparseKernelConfig = SparseKernelConfig(),
    layout: MapLayout = MapLayout(),
    props: ClassProps = ClassProps(),
) -> TrueMap:
    if props.K != 3:
        raise ValueError("the synthetic world uses exactly three classes")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    pts = grid.points
    dominant = np.where(np.abs(pts[:, 1]) >= layout.gravel_e, GRAVEL, ASPHALT)
    field_ = sample_field(rng, grid, layout.length_s, layout.length_e)
    if layout.water_intensity > 0:
        dominant[field_ > norm.ppf(1.0 - layout.water_intensity)] = WATER
    for s_c, e_c, radius in layout.water_patches:
        dominant[grid.distance(pts, np.array([s_c, e_c])) < radius] = WATER

    a = np.full((len(grid), props.K), layout.background)
    a[np.arange(len(grid)), dominant] = layout.concentration
    params = SpmParams(a, props.mu, props.lam, props.alpha, props.beta)
    g = rng.standard_gamma(a)
    w = g / g.sum(axis=1, keepdims=True)
    tau = rng.gamma(params.alpha, 1.0 / params.beta)
    m = rng.normal(params.mu, 1.0 / np.sqrt(params.lam * tau))
    return TrueMap(params, w, m, tau, grid, kernel, dominant)


def perturb_prior(true_map: TrueMap, seed: int, magnitude: float = 0.9, a=(1.0, 5.0, 1.0)) -> SpmParams:
    """Initial map: fixed concentrations and class parameters scaled by ``1 + U(-mag, mag)``."""
    if not 0 <= magnitude < 1:
        raise ValueError("perturbation magnitude must lie in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    P = true_map.params
    f = 1.0 + rng.uniform(-magnitude, magnitude, size=(4, P.K))
    return SpmParams.uniform(P.L, a, P.mu * f[0], P.lam * f[1], P.alpha * f[2], P.beta * f[3])


# -- trajectories ----------------------------------------------------------------


@dataclass(frozen=True)
class LateralProfile:
    """Lateral offset as a function of arc length: ``zero``, ``constant`` or ``sine``."""

    kind: str = "zero"
    amplitude: float = 0.0
    wavelength: float = 100.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "sine"):
            raise ValueError(f"unknown lateral profile {self.kind!r}")
        if self.kind == "sine" and self.wavelength <= 0:
            raise ValueError("wavelength must be positive")

    @property
    def max_abs(self) -> float:
        return 0.0 if self.kind == "zero" else abs(self.amplitude)

    def offset(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(s)
        if self.kind == "constant":
            return np.full_like(s, self.amplitude)
        return self.amplitude * np.sin(2.0 * np.pi * s / self.wavelength + self.phase)

    def slope(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.kind != "sine":
            return np.zeros_like(s)
        k = 2.0 * np.pi / self.wavelength
        return self.amplitude * k * np.cos(k * s + self.phase)


@dataclass(frozen=True)
class VehicleStates:
    t: np.ndarray
    s: np.ndarray
    e: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """Constant-speed drive along the path with a lateral offset profile."""

    spline: PathSpline
    speed: float
    profile: LateralProfile = LateralProfile()
    s_start: float = 0.0
    duration: float = 40.0
    rate: float = 40.0

    def at(self, t) -> VehicleStates:
        t = np.asarray(t, dtype=float)
        s = self.s_start + self.speed * t
        e = self.profile.offset(s)
        p, tan, kappa = self.spline.evaluate(s)
        bev = p + e[:, None] * np.column_stack([tan[:, 1], -tan[:, 0]])
        psi = np.arctan2(tan[:, 1], tan[:, 0])
        heading = psi - np.arctan2(self.profile.slope(s), 1.0 + kappa * e)
        return VehicleStates(t, s, e, bev[:, 0], bev[:, 1], heading)

    def times(self, rate: float | None = None) -> np.ndarray:
        rate = self.rate if rate is None else rate
        n = int(np.floor(self.duration * rate + 1e-9))
        return np.arange(n) / rate

    def states(self) -> VehicleStates:
        return self.at(self.times())


def generate_trajectory(spline: PathSpline, speed: float, profile: LateralProfile = LateralProfile(),
                        rate: float = 40.0, duration: float = 40.0, s_start: float = 0.0,
                        e_max: float = 6.0) -> Trajectory:
    if speed <= 0 or rate <= 0 or duration <= 0:
        raise ValueError("speed, rate and duration must be positive")
    if profile.max_abs > e_max:
        raise ValueError(f"lateral profile amplitude {profile.max_abs} exceeds e_max={e_max}")
    if not spline.closed and s_start + speed * duration > spline.length + 1e-9:
        raise ValueError("trajectory runs past the end of the path")
    return Trajectory(spline, float(speed), profile, float(s_start), float(duration), float(rate))


# -- measurement streams -----------------------------------------------------------


@dataclass(frozen=True)
class SensorConfig:
    """Measurement rates and the per-frame pixel budget.

    Pixels are drawn by stratifying the road corridor ahead of the vehicle
    (``near``..``far`` meters along the path, full corridor width) and
    rendering each ground point into the image; only pixels that land inside
    the image are kept.
    """

    semantic_rate: float = 20.0
    property_rate: float = 40.0
    pixels_per_frame: int = 64
    strata: tuple = (8, 8)
    near: float = 4.0
    far: float = 90.0
    e_max: float = 6.0


@dataclass
class MeasurementStream:
    """Time-ordered interleaved records; ``value`` is a 0-based class or ``y``."""

    t: np.ndarray
    kind: np.ndarray
    s: np.ndarray
    e: np.ndarray
    value: np.ndarray
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def select(self, kind: int) -> "MeasurementStream":
        k = self.kind == kind
        return MeasurementStream(self.t[k], self.kind[k], self.s[k], self.e[k], self.value[k], self.dropped, self.meta)

    def runs(self):
        """Yield ``(kind, slice)`` for maximal blocks of one kind sharing a timestamp."""
        n = len(self)
        if n == 0:
            return
        brk = np.flatnonzero((np.diff(self.kind) != 0) | (np.diff(self.t) != 0)) + 1
        starts = np.concatenate([[0], brk])
        ends = np.concatenate([brk, [n]])
        for a, b in zip(starts, ends):
            yield int(self.kind[a]), slice(int(a), int(b))

    def records(self):
        for i in range(len(self)):
            if self.kind[i] == SEMANTIC:
                yield {"type": "semantic", "t": float(self.t[i]), "s": float(self.s[i]),
                       "e": float(self.e[i]), "class": int(self.value[i]) + 1}
            else:
                yield {"type": "property", "t": float(self.t[i]), "s": float(self.s[i]),
                       "e": float(self.e[i]), "y": float(self.value[i])}

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"type": "header", "dropped": self.dropped, **self.meta}) + "\n")
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "MeasurementStream":
        t, kind, s, e, value = [], [], [], [], []
        dropped, meta = 0, {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    typ = rec["type"]
                    if typ == "header":
                        dropped = int(rec.pop("dropped", 0))
                        rec.pop("type")
                        meta = rec
                        continue
                    if typ == "semantic":
                        kind.append(SEMANTIC)
                        value.append(float(int(rec["class"]) - 1))
                    elif typ == "property":
                        kind.append(PROPERTY)
                        value.append(float(rec["y"]))
                    else:
                        raise ValueError(f"unknown record type {typ!r}")
                    t.append(float(rec["t"]))
                    s.append(float(rec["s"]))
                    e.append(float(rec["e"]))
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{Path(path).name}:{lineno}: malformed record ({exc})") from exc
        return cls(np.array(t), np.array(kind, dtype=int), np.array(s), np.array(e), np.array(value),
                   dropped, meta)


def _stratified(rng, n_strata, lo, hi, count):
    """Jittered stratified samples over a rectangle, cycling strata when count exceeds them."""
    ns, ne = n_strata
    cell = np.arange(count) % (ns * ne)
    i, j = cell // ne, cell % ne
    u = (i + rng.random(count)) / ns
    v = (j + rng.random(count)) / ne
    return lo[0] + u * (hi[0] - lo[0]), lo[1] + v * (hi[1] - lo[1])


def _draw_classes(rng, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    r = rng.random(len(probs)) * cdf[:, -1]
    return np.minimum((r[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def synthesize_measurements(true_map: TrueMap, trajectory: Trajectory, rig: CameraRig,
                            sensors: SensorConfig = SensorConfig(), seed: int = 0) -> MeasurementStream:
    ss = np.random.SeedSequence(seed).spawn(4)
    rng_pix, rng_cls = np.random.default_rng(ss[2]), np.random.default_rng(ss[3])
    spline = trajectory.spline
    e_max = sensors.e_max
    dropped = 0

    # semantics: sample ground points ahead, render to pixels, IPM back to path coordinates
    frames = trajectory.at(trajectory.times(sensors.semantic_rate))
    n_px = sensors.pixels_per_frame
    sem_t, sem_loc = [], []
    for k in range(len(frames.t)):
        ds, e = _stratified(rng_pix, sensors.strata, (sensors.near, -e_max), (sensors.far, e_max), n_px)
        s = frames.s[k] + ds
        if not spline.closed:
            inside = s <= spline.length
            dropped += int((~inside).sum())
            s, e = s[inside], e[inside]
        ground = spline.to_bev(s, e) if len(s) else np.zeros((0, 2))
        pose = rig.pose(frames.x[k], frames.y[k], frames.heading[k])
        X = np.column_stack([ground, np.full(len(ground), rig.plane_z)])
        pix = project_to_image(rig.intrinsics, pose, X)
        pts, status = ipm_project_batch(rig.intrinsics, pose, pix, rig.plane)
        ok = status == IPM_OK
        dropped += int((~ok).sum())
        sem_loc.append(pts[ok, :2])
        sem_t.append(np.full(int(ok.sum()), frames.t[k]))
    bev = np.concatenate(sem_loc) if sem_loc else np.zeros((0, 2))
    sem_t = np.concatenate(sem_t) if sem_t else np.zeros(0)
    s, e, status = spline.project_points(bev, e_max=e_max)
    ok = status == PROJ_OK
    dropped += int((~ok).sum())
    loc, sem_t = np.column_stack([s, e])[ok], sem_t[ok]
    probs = true_map.class_probs(loc)
    cov = ~np.isnan(probs[:, 0])
    dropped += int((~cov).sum())
    loc, sem_t, probs = loc[cov], sem_t[cov], probs[cov]
    labels = _draw_classes(rng_cls, probs)

    # properties at the contact point
    ticks = trajectory.at(trajectory.times(sensors.property_rate))
    ploc = np.column_stack([ticks.s, ticks.e])
    pprobs = true_map.class_probs(ploc)
    pcov = ~np.isnan(pprobs[:, 0])
    dropped += int((~pcov).sum())
    ploc, pt, pprobs = ploc[pcov], ticks.t[pcov], pprobs[pcov]
    pcls = _draw_classes(rng_cls, pprobs)
    y = rng_cls.normal(true_map.m[pcls], 1.0 / np.sqrt(true_map.tau[pcls]))

    t = np.concatenate([sem_t, pt])
    kind = np.concatenate([np.full(len(sem_t), SEMANTIC), np.full(len(pt), PROPERTY)])
    order = np.lexsort((kind, t))
    locs = np.concatenate([loc, ploc])[order]
    value = np.concatenate([labels.astype(float), y])[order]
    meta = {"seed": int(seed), "semantic_rate": sensors.semantic_rate, "property_rate": sensors.property_rate}
    return MeasurementStream(t[order], kind[order], locs[:, 0], locs[:, 1], value, dropped, meta)
