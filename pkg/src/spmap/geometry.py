"""Road centerlines as C2 piecewise-Bezier curves and the BEV <-> (s, e) map.

A :class:`PathSpline` is a sequence of ``M`` Bezier segments of a common
degree, each parameterized by a local ``u`` in ``[0, 1]``.  Arc length ``s``
is recovered through a per-segment quadrature table, so the public API speaks
meters along the path while the internals work in ``(segment, u)``.

Sign convention for the lateral offset: ``e = sign(g'(s) x (g(s) - p)) * |g(s) - p|``
with the 2-D scalar cross product, i.e. points to the right of the direction of
travel have positive ``e`` and ``(x, y) = g(s) + e * (t_y, -t_x)`` for the unit
tangent ``t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg import null_space
from scipy.spatial import cKDTree
from scipy.special import comb

from .errors import AmbiguousProjectionError, DomainError, FitError, OutOfCorridorError

FORMAT_VERSION = 1

_N_SUB = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)
_SAMPLE_SPACING = 0.5

# project_points status codes
OK = 0
OUT_OF_CORRIDOR = 1
PAST_END = 2
AMBIGUOUS = 3


class BevCoord(NamedTuple):
    x: float
    y: float


class PathCoord(NamedTuple):
    s: float
    e: float


@dataclass(frozen=True)
class FitReport:
    rms: float
    max_error: float
    knot_residual: float


@dataclass(frozen=True)
class DiffeoValidity:
    max_curvature: float
    min_far_separation: float
    valid: bool


def _power_matrix(d: int) -> np.ndarray:
    """Matrix taking Bernstein control points to monomial coefficients."""
    B = np.zeros((d + 1, d + 1))
    for j in range(d + 1):
        for k in range(j + 1):
            B[j, k] = comb(d, j, exact=True) * comb(j, k, exact=True) * (-1) ** (j - k)
    return B


def _bernstein(d: int, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)[:, None]
    k = np.arange(d + 1)
    binom = np.array([comb(d, i, exact=True) for i in k], dtype=float)
    return binom * u**k * (1.0 - u) ** (d - k)


def _horner(coef: np.ndarray, u: np.ndarray) -> np.ndarray:
    # coef: (N, n, 2), u: (N,)
    out = coef[:, -1, :].copy()
    for j in range(coef.shape[1] - 2, -1, -1):
        out = out * u[:, None] + coef[:, j, :]
    return out


class PathSpline:
    """Immutable C2 piecewise-Bezier curve with arc-length lookup.

    ``control_points`` has shape ``(M, degree + 1, 2)``.  All derived tables
    are built once in the constructor; instances are safe to share between
    threads.
    """

    def __init__(self, control_points, closed: bool = False, fit_report: FitReport | None = None):
        cp = np.array(control_points, dtype=float)
        if cp.ndim != 3 or cp.shape[2] != 2 or cp.shape[1] < 2:
            raise ValueError("control_points must have shape (M, degree+1, 2)")
        if not np.all(np.isfinite(cp)):
            raise ValueError("control points must be finite")
        cp.setflags(write=False)
        self.control_points = cp
        self.closed = bool(closed)
        self.degree = cp.shape[1] - 1
        self.n_segments = cp.shape[0]
        self.fit_report = fit_report

        d = self.degree
        origin = cp[:, 0, :]
        c0 = np.einsum("jk,mkc->mjc", _power_matrix(d), cp - origin[:, None, :])
        c0[:, 0, :] = origin
        self._c0 = c0
        self._c1 = c0[:, 1:, :] * np.arange(1, d + 1)[None, :, None]
        if d >= 2:
            self._c2 = self._c1[:, 1:, :] * np.arange(1, d)[None, :, None]
        else:
            self._c2 = np.zeros((self.n_segments, 1, 2))

        self._build_arc_table()
        self._build_samples()

    # -- construction helpers -------------------------------------------

    def _build_arc_table(self) -> None:
        M = self.n_segments
        a = np.arange(_N_SUB) / _N_SUB
        nodes = a[:, None] + (_GL_X[None, :] + 1.0) / (2.0 * _N_SUB)  # (NSUB, nGL)
        seg = np.repeat(np.arange(M), nodes.size)
        u = np.tile(nodes.ravel(), M)
        sp = self._speed(seg, u).reshape(M, _N_SUB, -1)
        lengths = sp @ _GL_W / (2.0 * _N_SUB)
        cum = np.zeros((M, _N_SUB + 1))
        cum[:, 1:] = np.cumsum(lengths, axis=1)
        if np.any(np.diff(cum, axis=1) <= 0):
            raise FitError("degenerate segment: arc-length table not strictly increasing")
        self._cum = cum
        knot_s = np.zeros(M + 1)
        knot_s[1:] = np.cumsum(cum[:, -1])
        knot_s.setflags(write=False)
        self.knot_s = knot_s
        self.length = float(knot_s[-1])

    def _build_samples(self) -> None:
        segs, us = [], []
        for m in range(self.n_segments):
            n = max(8, int(math.ceil(self._cum[m, -1] / _SAMPLE_SPACING)))
            us.append(np.arange(n) / n)
            segs.append(np.full(n, m))
        if not self.closed:
            us.append(np.array([1.0]))
            segs.append(np.array([self.n_segments - 1]))
        self._sample_seg = np.concatenate(segs)
        self._sample_u = np.concatenate(us)
        self._sample_xy = self._point(self._sample_seg, self._sample_u)
        self._sample_s = self._s_of(self._sample_seg, self._sample_u)
        self._sample_h = float(np.max(np.linalg.norm(np.diff(self._sample_xy, axis=0), axis=1)))
        self._tree = cKDTree(self._sample_xy)

    # -- raw polynomial evaluation --------------------------------------

    def _point(self, seg, u):
        return _horner(self._c0[seg], u)

    def _d1(self, seg, u):
        return _horner(self._c1[seg], u)

    def _d2(self, seg, u):
        return _horner(self._c2[seg], u)

    def _speed(self, seg, u):
        return np.linalg.norm(self._d1(seg, u), axis=1)

    def _seg_length(self, seg, u):
        j = np.clip(np.floor(u * _N_SUB).astype(int), 0, _N_SUB - 1)
        a = j / _N_SUB
        h = u - a
        nodes = a[:, None] + h[:, None] * (_GL_X[None, :] + 1.0) / 2.0
        n = nodes.shape[1]
        sp = self._speed(np.repeat(seg, n), nodes.ravel()).reshape(-1, n)
        return self._cum[seg, j] + 0.5 * h * (sp @ _GL_W)

    def _s_of(self, seg, u):
        return self.knot_s[seg] + self._seg_length(seg, u)

    def _param_of(self, s):
        """Invert arc length; ``s`` must already lie in ``[0, length]``."""
        M = self.n_segments
        seg = np.clip(np.searchsorted(self.knot_s, s, side="right") - 1, 0, M - 1)
        local = s - self.knot_s[seg]
        cum = self._cum[seg]
        j = np.clip((cum <= local[:, None]).sum(axis=1) - 1, 0, _N_SUB - 1)
        rows = np.arange(s.size)
        frac = (local - cum[rows, j]) / (cum[rows, j + 1] - cum[rows, j])
        u = (j + frac) / _N_SUB
        for _ in range(10):
            F = self._seg_length(seg, u) - local
            du = F / self._speed(seg, u)
            u = u - du
            if np.all(np.abs(du) < 1e-14):
                break
        return seg, u

    # -- public vectorized API ------------------------------------------

    @property
    def s_min(self) -> float:
        return 0.0

    @property
    def s_max(self) -> float:
        return self.length

    def wrap_s(self, s) -> np.ndarray:
        """Reduce ``s`` onto the domain; raises DomainError on open paths."""
        s = np.asarray(s, dtype=float)
        if self.closed:
            return np.mod(s, self.length)
        tol = 1e-9 * max(1.0, self.length)
        if np.any(~np.isfinite(s)) or np.any(s < -tol) or np.any(s > self.length + tol):
            raise DomainError(f"arc length outside [0, {self.length:.6f}] on open path")
        return np.clip(s, 0.0, self.length)

    def evaluate(self, s):
        """Points, unit tangents and signed curvatures at arc lengths ``s``."""
        s = np.atleast_1d(self.wrap_s(s))
        seg, u = self._param_of(s)
        p = self._point(seg, u)
        d1 = self._d1(seg, u)
        d2 = self._d2(seg, u)
        speed = np.linalg.norm(d1, axis=1)
        tangent = d1 / speed[:, None]
        curvature = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / speed**3
        return p, tangent, curvature

    def to_bev(self, s, e) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        e = np.broadcast_to(np.asarray(e, dtype=float), s.shape)
        p, t, _ = self.evaluate(s)
        return np.column_stack([p[:, 0] + e * t[:, 1], p[:, 1] - e * t[:, 0]])

    def _newton_project(self, pts, seg, u, max_iter=40):
        M = self.n_segments
        seg = seg.copy()
        u = u.astype(float).copy()
        done = np.zeros(len(pts), dtype=bool)
        for _ in range(max_iter):
            act = ~done
            if not act.any():
                break
            sa, ua, pa = seg[act], u[act], pts[act]
            r = self._point(sa, ua) - pa
            g1 = self._d1(sa, ua)
            g2 = self._d2(sa, ua)
            f = np.sum(g1 * r, axis=1)
            fp = np.sum(g2 * r, axis=1) + np.sum(g1 * g1, axis=1)
            step = np.where(fp > 0, f / np.where(fp > 0, fp, 1.0), np.sign(f) * 0.05)
            un = ua - step
            sn = sa.copy()
            hi = un > 1.0
            lo = un < 0.0
            if self.closed:
                sn[hi] = (sn[hi] + 1) % M
                un[hi] -= 1.0
                sn[lo] = (sn[lo] - 1) % M
                un[lo] += 1.0
            else:
                move_hi = hi & (sn < M - 1)
                move_lo = lo & (sn > 0)
                sn[move_hi] += 1
                un[move_hi] -= 1.0
                sn[move_lo] -= 1
                un[move_lo] += 1.0
                un = np.clip(un, 0.0, 1.0)
            un = np.clip(un, 0.0, 1.0)
            moved = (sn != sa) | (np.abs(un - ua) > 1e-12)
            seg[act] = sn
            u[act] = un
            idx = np.flatnonzero(act)
            done[idx[~moved]] = True
        return seg, u, done

    def _grid_bisect(self, p):
        """Fallback projection: dense scan, then bisection on the stationarity condition."""
        d2 = np.sum((self._sample_xy - p) ** 2, axis=1)
        k = int(np.argmin(d2))
        seg0, u0 = int(self._sample_seg[k]), float(self._sample_u[k])
        n = max(8, int(math.ceil(self._cum[seg0, -1] / _SAMPLE_SPACING)))

        def f(t):
            sg, uu = seg0, t
            if self.closed:
                if uu > 1.0:
                    sg, uu = (sg + 1) % self.n_segments, uu - 1.0
                elif uu < 0.0:
                    sg, uu = (sg - 1) % self.n_segments, uu + 1.0
            elif uu > 1.0 and sg < self.n_segments - 1:
                sg, uu = sg + 1, uu - 1.0
            elif uu < 0.0 and sg > 0:
                sg, uu = sg - 1, uu + 1.0
            uu = min(max(uu, 0.0), 1.0)
            sa, ua = np.array([sg]), np.array([uu])
            r = self._point(sa, ua)[0] - p
            return float(self._d1(sa, ua)[0] @ r), sg, uu

        lo, hi = u0 - 1.0 / n, u0 + 1.0 / n
        flo, _, _ = f(lo)
        fhi, _, _ = f(hi)
        if flo > 0 or fhi < 0:
            _, sg, uu = f(u0)
            return sg, uu
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm, _, _ = f(mid)
            if fm > 0:
                hi = mid
            else:
                lo = mid
            if hi - lo < 1e-15:
                break
        _, sg, uu = f(0.5 * (lo + hi))
        return sg, uu

    def project_points(self, pts, e_max: float | None = None, check_ambiguity: bool = True):
        """Vectorized BEV -> (s, e).

        Returns ``(s, e, status)``; entries with nonzero status (see module
        constants) hold NaN.  Use :func:`to_path_coords` for the raising
        single-point variant.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        _, k = self._tree.query(pts)
        seg, u, conv = self._newton_project(pts, self._sample_seg[k], self._sample_u[k])
        for i in np.flatnonzero(~conv):
            seg[i], u[i] = self._grid_bisect(pts[i])

        r = self._point(seg, u) - pts
        g1 = self._d1(seg, u)
        dist = np.linalg.norm(r, axis=1)
        s = self._s_of(seg, u)
        status = np.zeros(n, dtype=int)

        if not self.closed:
            at_end = ((seg == 0) & (u <= 0.0)) | ((seg == self.n_segments - 1) & (u >= 1.0))
            tangential = np.abs(np.sum(g1 * r, axis=1)) / np.linalg.norm(g1, axis=1)
            status[at_end & (tangential > 1e-7)] = PAST_END

        if check_ambiguity:
            s, dist, seg, u, status = self._global_check(pts, s, dist, seg, u, status)
            r = self._point(seg, u) - pts
            g1 = self._d1(seg, u)

        cross = g1[:, 0] * r[:, 1] - g1[:, 1] * r[:, 0]
        e = np.sign(cross) * dist
        if e_max is not None:
            status[(status == OK) & (dist > e_max)] = OUT_OF_CORRIDOR
        bad = status != OK
        s[bad] = np.nan
        e[bad] = np.nan
        return s, e, status

    def _s_gap(self, a, b):
        d = np.abs(a - b)
        if self.closed:
            d = np.minimum(d, self.length - d)
        return d

    def _global_check(self, pts, s, dist, seg, u, status):
        h = self._sample_h
        lists = self._tree.query_ball_point(pts, dist + h)
        lens = np.fromiter((len(x) for x in lists), dtype=int, count=len(lists))
        if lens.sum() == 0:
            return s, dist, seg, u, status
        flat = np.concatenate([np.asarray(x, dtype=int) for x in lists if len(x)])
        owner = np.repeat(np.arange(len(pts)), lens)
        far = self._s_gap(self._sample_s[flat], s[owner]) > 2.0 * (dist[owner] + h) + h
        if not far.any():
            return s, dist, seg, u, status
        cand, who = flat[far], owner[far]
        cs, cu, _ = self._newton_project(pts[who], self._sample_seg[cand], self._sample_u[cand])
        cdist = np.linalg.norm(self._point(cs, cu) - pts[who], axis=1)
        cs_s = self._s_of(cs, cu)
        for j in np.argsort(cdist):
            i = who[j]
            if self._s_gap(cs_s[j], s[i]) <= 2.0 * (dist[i] + h):
                continue
            tol = 1e-9 * max(1.0, dist[i])
            if cdist[j] < dist[i] - tol:
                seg[i], u[i], s[i], dist[i] = cs[j], cu[j], cs_s[j], cdist[j]
            elif abs(cdist[j] - dist[i]) <= tol:
                status[i] = AMBIGUOUS
        return s, dist, seg, u, status

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "degree": self.degree,
            "closed": self.closed,
            "knot_arc_lengths": [float(x) for x in self.knot_s],
            "control_points": [[float(x), float(y)] for x, y in self.control_points.reshape(-1, 2)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PathSpline":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported spline format_version {doc.get('format_version')!r}")
        d = int(doc["degree"])
        cp = np.asarray(doc["control_points"], dtype=float).reshape(-1, d + 1, 2)
        spline = cls(cp, closed=bool(doc["closed"]))
        stored = np.asarray(doc["knot_arc_lengths"], dtype=float)
        if stored.shape != spline.knot_s.shape or not np.allclose(stored, spline.knot_s, rtol=0, atol=1e-6):
            raise ValueError("knot arc lengths inconsistent with control points")
        return spline


def save_spline(spline: PathSpline, path) -> None:
    Path(path).write_text(json.dumps(spline.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_spline(path) -> PathSpline:
    return PathSpline.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- operations -----------------------------------------------------------


def _constraint_matrix(M: int, d: int, closed: bool) -> np.ndarray:
    n = M * (d + 1)
    orders = min(2, d)
    diff = [np.array([1.0]), np.array([-1.0, 1.0]), np.array([1.0, -2.0, 1.0])]
    rows = []
    pairs = [(m, m + 1) for m in range(M - 1)]
    if closed:
        pairs.append((M - 1, 0))
    for a, b in pairs:
        for r in range(orders + 1):
            row = np.zeros(n)
            # r-th forward difference at the end of a equals that at the start of b
            row[a * (d + 1) + d - r : a * (d + 1) + d + 1] += diff[r]
            row[b * (d + 1) : b * (d + 1) + r + 1] -= diff[r]
            rows.append(row)
    return np.array(rows).reshape(-1, n)


def _solve_constrained(A: np.ndarray, b: np.ndarray, C: np.ndarray) -> np.ndarray:
    n = A.shape[1]
    if C.size:
        Z = null_space(C)
        if Z.shape[1] != n - C.shape[0]:
            raise FitError("continuity constraint system is rank deficient")
    else:
        Z = np.eye(n)
    AZ = A @ Z
    z, _, rank, _ = np.linalg.lstsq(AZ, b, rcond=None)
    if rank < AZ.shape[1]:
        raise FitError("least-squares system is rank deficient; add waypoints per segment")
    return Z @ z


def fit_path(waypoints, M: int, degree: int, closed: bool = False, reparam_passes: int = 2) -> PathSpline:
    """Least-squares C2 piecewise-Bezier fit to ordered waypoints.

    Parameters start from chord length and are refined by ``reparam_passes``
    closest-point projections.  The continuity constraints are eliminated
    through a null-space basis of the constraint matrix.
    """
    W = np.asarray(waypoints, dtype=float)
    if W.ndim != 2 or W.shape[1] != 2:
        raise ValueError("waypoints must be an (N, 2) array")
    if M < 1 or degree < 1:
        raise ValueError("M and degree must be positive")
    if closed and len(W) > 1 and np.allclose(W[0], W[-1]):
        W = W[:-1]
    if len(W) < M * (degree + 1):
        raise ValueError(f"need at least M*(degree+1) = {M * (degree + 1)} waypoints, got {len(W)}")
    chords = np.linalg.norm(np.diff(W, axis=0), axis=1)
    if np.any(chords <= 0):
        raise ValueError("waypoints contain repeated consecutive points")

    cum = np.concatenate([[0.0], np.cumsum(chords)])
    total = cum[-1] + (np.linalg.norm(W[0] - W[-1]) if closed else 0.0)
    t = M * cum / total

    C = _constraint_matrix(M, degree, closed)
    n = M * (degree + 1)

    def solve(t):
        seg = np.minimum(np.floor(t).astype(int), M - 1)
        u = t - seg
        A = np.zeros((len(W), n))
        basis = _bernstein(degree, u)
        cols = seg[:, None] * (degree + 1) + np.arange(degree + 1)[None, :]
        np.put_along_axis(A, cols, basis, axis=1)
        x = _solve_constrained(A, W, C)
        return x, seg, u

    x, seg, u = solve(t)
    spline = PathSpline(x.reshape(M, degree + 1, 2), closed=closed)
    for _ in range(reparam_passes):
        seg, u, _ = spline._newton_project(W, seg, u)
        t = seg + u
        x, seg, u = solve(t)
        spline = PathSpline(x.reshape(M, degree + 1, 2), closed=closed)

    err = np.linalg.norm(spline._point(seg, u) - W, axis=1)
    report = FitReport(
        rms=float(np.sqrt(np.mean(err**2))),
        max_error=float(err.max()),
        knot_residual=float(np.max(np.abs(C @ x))) if C.size else 0.0,
    )
    return PathSpline(spline.control_points, closed=closed, fit_report=report)


def eval_path(spline: PathSpline, s: float):
    """Return ``(point, unit_tangent, curvature)`` at arc length ``s``."""
    p, t, k = spline.evaluate([s])
    return BevCoord(float(p[0, 0]), float(p[0, 1])), t[0], float(k[0])


def to_path_coords(spline: PathSpline, p, e_max: float | None = None) -> PathCoord:
    s, e, status = spline.project_points(np.asarray(p, dtype=float)[None, :], e_max=e_max)
    code = int(status[0])
    if code == OUT_OF_CORRIDOR:
        raise OutOfCorridorError(f"point {tuple(p)} is farther than e_max={e_max} from the path")
    if code == PAST_END:
        raise DomainError(f"point {tuple(p)} projects beyond an end of the open path")
    if code == AMBIGUOUS:
        raise AmbiguousProjectionError(f"point {tuple(p)} has two nearest path points")
    return PathCoord(float(s[0]), float(e[0]))


def to_bev_coords(spline: PathSpline, q) -> BevCoord:
    s, e = q
    xy = spline.to_bev([s], [e])[0]
    return BevCoord(float(xy[0]), float(xy[1]))


def validate_diffeo(spline: PathSpline, e_max: float) -> DiffeoValidity:
    """Check the curvature and far-separation hypotheses of the (s, e) diffeomorphism."""
    h = min(_SAMPLE_SPACING, e_max / 8.0)
    n = max(16, int(math.ceil(spline.length / h)))
    if spline.closed:
        s = np.arange(n) * (spline.length / n)
    else:
        s = np.linspace(0.0, spline.length, n + 1)
    pts, _, kappa = spline.evaluate(s)
    max_curv = float(np.max(np.abs(kappa)))

    tree = cKDTree(pts)
    far_gap = math.pi * e_max
    span = float(np.max(np.ptp(pts, axis=0))) if len(pts) > 1 else 0.0
    radius = 4.0 * e_max
    min_sep = math.inf
    while True:
        pairs = tree.query_pairs(radius, output_type="ndarray")
        if len(pairs):
            gap = spline._s_gap(s[pairs[:, 0]], s[pairs[:, 1]])
            far = pairs[gap > far_gap]
            if len(far):
                min_sep = float(np.min(np.linalg.norm(pts[far[:, 0]] - pts[far[:, 1]], axis=1)))
                break
        if radius > span * 1.01 + 1.0:
            break
        radius *= 2.0
    valid = max_curv < 1.0 / e_max and min_sep > 2.0 * e_max
    return DiffeoValidity(max_curvature=max_curv, min_far_separation=min_sep, valid=bool(valid))


def synthetic_road(length: float = 3218.7, spacing: float = 5.0) -> np.ndarray:
    """Deterministic gently curving open road as BEV waypoints.

    Heading is a sum of three sinusoids in arc length, so curvature stays
    below ~0.01 1/m and the road never folds back on itself.
    """
    s = np.linspace(0.0, length, int(round(length / 0.05)) + 1)
    comps = [(0.6, 1500.0, 0.3), (0.3, 600.0, 1.1), (0.15, 250.0, 2.0)]
    heading = sum(A * np.sin(2 * np.pi * s / P + ph) for A, P, ph in comps)
    ds = np.diff(s)
    mid = 0.5 * (heading[1:] + heading[:-1])
    x = np.concatenate([[0.0], np.cumsum(np.cos(mid) * ds)])
    y = np.concatenate([[0.0], np.cumsum(np.sin(mid) * ds)])
    n_way = int(round(length / spacing))
    idx = np.round(np.linspace(0, len(s) - 1, n_way + 1)).astype(int)
    return np.column_stack([x[idx], y[idx]])
