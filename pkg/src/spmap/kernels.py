"""Compact-support kernel and normalized interpolation weights over support points.

The kernel is

    K(d) = sigma * [ (2 + cos(2 pi d/D)) / 3 * (1 - d/D) + sin(2 pi d/D) / (2 pi) ]

for ``d < D`` and exactly zero for ``d >= D``.  It is C2 at ``d = D``, so the
interpolation weights are C2 in the query location wherever at least one
support point is in range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import CoverageError


def _sinpi(t):
    t = np.asarray(t, dtype=float)
    n = np.rint(2.0 * t)
    f = t - 0.5 * n
    q = np.mod(n, 4).astype(int)
    sf, cf = np.sin(np.pi * f), np.cos(np.pi * f)
    return np.choose(q, [sf, cf, -sf, -cf])


def _cospi(t):
    t = np.asarray(t, dtype=float)
    n = np.rint(2.0 * t)
    f = t - 0.5 * n
    q = np.mod(n, 4).astype(int)
    sf, cf = np.sin(np.pi * f), np.cos(np.pi * f)
    return np.choose(q, [cf, -sf, -cf, sf])


@dataclass(frozen=True)
class SparseKernelConfig:
    D: float = 3.0
    sigma: float = 1.0

    def __post_init__(self):
        if not (self.D > 0 and self.sigma > 0):
            raise ValueError("kernel D and sigma must be positive")


# Near d = D the kernel vanishes like (1 - d/D)^5 and the closed form cancels
# catastrophically, so it is summed as a series in u = 2 pi (1 - d/D) there:
# K = sigma / (2 pi) * sum_k (-1)^k (2k - 2) u^(2k+1) / (3 (2k+1)!),  k >= 2.
_EDGE_U = 1.0
_EDGE_COEF = np.array([(-1) ** k * (2 * k - 2) / (3.0 * math.factorial(2 * k + 1)) for k in range(2, 13)])
_EDGE_POW = np.array([2 * k + 1 for k in range(2, 13)])


def kernel_eval(cfg: SparseKernelConfig, d):
    """Kernel value at distance(s) ``d`` (scalar in, scalar out)."""
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr < 0):
        raise ValueError("distance must be non-negative")
    x = d_arr / cfg.D
    inside = x < 1.0
    xi = np.where(inside, x, 0.0)
    val = cfg.sigma * ((2.0 + _cospi(2.0 * xi)) / 3.0 * (1.0 - xi) + _sinpi(2.0 * xi) / (2.0 * math.pi))
    u = 2.0 * math.pi * np.where(inside, (cfg.D - d_arr) / cfg.D, 1.0)
    edge = inside & (u < _EDGE_U)
    if np.any(edge):
        ue = np.where(edge, u, 0.0)
        series = (ue[..., None] ** _EDGE_POW) @ _EDGE_COEF
        val = np.where(edge, cfg.sigma * series / (2.0 * math.pi), val)
    out = np.where(inside, np.maximum(val, 0.0), 0.0)
    return float(out) if out.ndim == 0 else out


def kernel_deriv(cfg: SparseKernelConfig, d):
    """dK/dd; zero at ``d = 0`` and for ``d >= D``."""
    d_arr = np.asarray(d, dtype=float)
    x = d_arr / cfg.D
    inside = x < 1.0
    xi = np.where(inside, x, 0.0)
    val = (cfg.sigma / cfg.D) * (
        -(2.0 * math.pi / 3.0) * _sinpi(2.0 * xi) * (1.0 - xi) + (2.0 / 3.0) * (_cospi(2.0 * xi) - 1.0)
    )
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class InterpWeights:
    indices: np.ndarray
    weights: np.ndarray

    def __iter__(self):
        return iter(zip(self.indices.tolist(), self.weights.tolist()))

    def __len__(self):
        return len(self.indices)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.weights.tolist()))


class SupportGrid:
    """Support points ``v_l`` in path coordinates with a bucket-grid index.

    The index uses square-ish buckets of side ``>= radius`` so that every point
    within ``radius`` of a query lies in the 3x3 bucket neighborhood.  On closed
    paths ``s`` wraps with ``period``.
    """

    def __init__(self, points, radius: float, closed: bool = False, period: float | None = None,
                 lattice: dict | None = None):
        pts = np.array(points, dtype=float).reshape(-1, 2)
        if closed and not (period and period > 0):
            raise ValueError("closed grids need a positive period")
        if radius <= 0:
            raise ValueError("radius must be positive")
        pts.setflags(write=False)
        self.points = pts
        self.radius = float(radius)
        self.closed = bool(closed)
        self.period = float(period) if closed else None
        self.lattice = lattice
        self._build_index()

    def __len__(self):
        return len(self.points)

    @classmethod
    def regular(cls, s_min, s_max, e_min, e_max, spacing_s, spacing_e, radius,
                closed: bool = False, period: float | None = None) -> "SupportGrid":
        """Lattice with ``s`` major ordering: index ``l = i_s * n_e + i_e``."""
        if spacing_s <= 0 or spacing_e <= 0:
            raise ValueError("grid spacings must be positive")
        if closed:
            s_vals = np.arange(0.0, period - 1e-9, spacing_s)
        else:
            s_vals = s_min + spacing_s * np.arange(int(math.floor((s_max - s_min) / spacing_s + 1e-9)) + 1)
        e_vals = e_min + spacing_e * np.arange(int(math.floor((e_max - e_min) / spacing_e + 1e-9)) + 1)
        S, E = np.meshgrid(s_vals, e_vals, indexing="ij")
        lattice = {
            "kind": "lattice",
            "s_min": float(s_min) if not closed else 0.0,
            "s_max": float(s_max) if not closed else float(period),
            "e_min": float(e_min),
            "e_max": float(e_max),
            "spacing_s": float(spacing_s),
            "spacing_e": float(spacing_e),
            "n_s": len(s_vals),
            "n_e": len(e_vals),
        }
        return cls(np.column_stack([S.ravel(), E.ravel()]), radius, closed, period, lattice)

    def descriptor(self) -> dict:
        doc = {"radius": self.radius, "closed": self.closed, "period": self.period}
        if self.lattice is not None:
            doc.update(self.lattice)
        else:
            doc["kind"] = "points"
            doc["points"] = self.points.tolist()
        return doc

    @classmethod
    def from_descriptor(cls, doc: dict) -> "SupportGrid":
        if doc.get("kind") == "lattice":
            return cls.regular(doc["s_min"], doc["s_max"], doc["e_min"], doc["e_max"],
                               doc["spacing_s"], doc["spacing_e"], doc["radius"],
                               closed=doc["closed"], period=doc["period"])
        return cls(doc["points"], doc["radius"], doc["closed"], doc["period"])

    @property
    def s_values(self) -> np.ndarray:
        lat = self.lattice
        return self.points[:: lat["n_e"], 0]

    @property
    def e_values(self) -> np.ndarray:
        lat = self.lattice
        return self.points[: lat["n_e"], 1]

    # -- index ------------------------------------------------------------

    def _build_index(self) -> None:
        r = self.radius
        pts = self.points
        if self.closed:
            self._n_bs = max(1, int(math.floor(self.period / r)))
            self._b_s = self.period / self._n_bs
            self._s0 = 0.0
        else:
            self._b_s = r
            self._s0 = float(pts[:, 0].min()) if len(pts) else 0.0
        self._b_e = r
        self._e0 = float(pts[:, 1].min()) if len(pts) else 0.0
        keys = self._keys(pts)
        buckets: dict[tuple[int, int], list[int]] = {}
        for idx, key in enumerate(map(tuple, keys)):
            buckets.setdefault(key, []).append(idx)
        self._buckets = {k: np.array(v, dtype=int) for k, v in buckets.items()}
        self._hood: dict[tuple[int, int], np.ndarray] = {}
        empty = np.zeros(0, dtype=int)
        for i, j in {(a + di, b + dj) for a, b in self._buckets for di in (-1, 0, 1) for dj in (-1, 0, 1)}:
            key = (i % self._n_bs, j) if self.closed else (i, j)
            if key in self._hood:
                continue
            parts = []
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ni = key[0] + di
                    if self.closed:
                        ni %= self._n_bs
                    parts.append(self._buckets.get((ni, key[1] + dj), empty))
            self._hood[key] = np.unique(np.concatenate(parts))
        self._empty = empty

    def _keys(self, v: np.ndarray) -> np.ndarray:
        s = v[:, 0]
        if self.closed:
            s = np.mod(s, self.period)
        i = np.floor((s - self._s0) / self._b_s).astype(int)
        if self.closed:
            i = np.mod(i, self._n_bs)
        j = np.floor((v[:, 1] - self._e0) / self._b_e).astype(int)
        return np.column_stack([i, j])

    def candidates(self, v) -> np.ndarray:
        key = tuple(self._keys(np.asarray(v, dtype=float).reshape(1, 2))[0])
        return self._hood.get(key, self._empty)

    def offsets(self, v, idx: np.ndarray) -> np.ndarray:
        """(ds, de) from support points ``idx`` to ``v`` with wrapped ``ds``."""
        v = np.asarray(v, dtype=float)
        diff = v[..., None, :] - self.points[idx] if v.ndim > 1 else v - self.points[idx]
        if self.closed:
            P = self.period
            diff[..., 0] = np.mod(diff[..., 0] + 0.5 * P, P) - 0.5 * P
        return diff

    def neighbors(self, v, radius: float | None = None):
        """Indices and distances of support points strictly within ``radius``."""
        radius = self.radius if radius is None else radius
        if radius > self.radius:
            raise ValueError("query radius exceeds index radius")
        idx = self.candidates(v)
        if not len(idx):
            return idx, np.zeros(0)
        dist = np.linalg.norm(self.offsets(v, idx), axis=1)
        keep = dist < radius
        return idx[keep], dist[keep]

    def distance(self, a, b) -> np.ndarray:
        """Path-coordinate distance (wrapped on closed paths)."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.closed:
            d[..., 0] = np.mod(d[..., 0] + 0.5 * self.period, self.period) - 0.5 * self.period
        return np.linalg.norm(d, axis=-1)


def _check_radius(cfg: SparseKernelConfig, grid: SupportGrid) -> None:
    if grid.radius < cfg.D:
        raise ValueError("support grid index radius smaller than kernel bandwidth")


def interp_weights(cfg: SparseKernelConfig, grid: SupportGrid, v) -> InterpWeights:
    _check_radius(cfg, grid)
    idx, dist = grid.neighbors(v, cfg.D)
    k = kernel_eval(cfg, dist) if len(idx) else np.zeros(0)
    keep = k > 0
    idx, k = idx[keep], k[keep]
    total = k.sum()
    if not len(idx) or total <= 0:
        raise CoverageError(f"no support point within D={cfg.D} of {tuple(np.asarray(v).tolist())}")
    order = np.argsort(idx)
    return InterpWeights(idx[order], k[order] / total)


def interp_weights_grad(cfg: SparseKernelConfig, grid: SupportGrid, v):
    """Weights and their gradient w.r.t. ``v = (s, e)``, shape ``(n, 2)``."""
    _check_radius(cfg, grid)
    idx, _ = grid.neighbors(v, cfg.D)
    off = grid.offsets(v, idx)
    dist = np.linalg.norm(off, axis=1)
    k = kernel_eval(cfg, dist) if len(idx) else np.zeros(0)
    keep = k > 0
    idx, off, dist, k = idx[keep], off[keep], dist[keep], k[keep]
    if not len(idx):
        raise CoverageError(f"no support point within D={cfg.D} of {tuple(np.asarray(v).tolist())}")
    dk = kernel_deriv(cfg, dist)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[:, None] > 0, off / dist[:, None], 0.0)
    grad_k = dk[:, None] * unit
    S = k.sum()
    grad_S = grad_k.sum(axis=0)
    w = k / S
    grad_w = (grad_k * S - k[:, None] * grad_S[None, :]) / S**2
    order = np.argsort(idx)
    return InterpWeights(idx[order], w[order]), grad_w[order]


def _lattice_candidates(grid: SupportGrid, q: np.ndarray, D: float) -> np.ndarray:
    """Flat indices ``(n, C)`` of lattice points in the bounding box of radius D; -1 if absent."""
    lat = grid.lattice
    ds, de = lat["spacing_s"], lat["spacing_e"]
    n_s, n_e = lat["n_s"], lat["n_e"]
    hs, he = int(math.ceil(D / ds)), int(math.ceil(D / de))
    s = q[:, 0]
    if grid.closed:
        s = np.mod(s, grid.period)
    i0 = np.floor((s - lat["s_min"]) / ds).astype(int)
    j0 = np.floor((q[:, 1] - lat["e_min"]) / de).astype(int)
    di, dj = np.meshgrid(np.arange(-hs, hs + 2), np.arange(-he, he + 2), indexing="ij")
    i = i0[:, None] + di.ravel()[None, :]
    j = j0[:, None] + dj.ravel()[None, :]
    ok = (j >= 0) & (j < n_e)
    if grid.closed:
        i = np.mod(i, n_s)
    else:
        ok &= (i >= 0) & (i < n_s)
    return np.where(ok, i * n_e + j, -1)


def interp_matrix(cfg: SparseKernelConfig, grid: SupportGrid, queries):
    """Interpolation weights for many queries as a CSR matrix ``(n_queries, L)``.

    Returns ``(W, covered)``; rows of uncovered queries are empty.
    """
    _check_radius(cfg, grid)
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    if grid.lattice is not None:
        cand = _lattice_candidates(grid, q, cfg.D)
        valid = cand >= 0
        diff = q[:, None, :] - grid.points[np.maximum(cand, 0)]
        if grid.closed:
            P = grid.period
            diff[..., 0] = np.mod(diff[..., 0] + 0.5 * P, P) - 0.5 * P
        dist = np.where(valid, np.linalg.norm(diff, axis=-1), cfg.D)
        k = kernel_eval(cfg, np.minimum(dist, cfg.D))
        rows, c = np.nonzero(k > 0)
        cols, vals = cand[rows, c], k[rows, c]
    else:
        rows, cols, vals = _bucket_entries(cfg, grid, q)
    K = sparse.csr_matrix((vals, (rows, cols)), shape=(len(q), len(grid)))
    K.sort_indices()
    totals = np.asarray(K.sum(axis=1)).ravel()
    covered = totals > 0
    K.data /= np.repeat(totals, np.diff(K.indptr))
    return K, covered


def _bucket_entries(cfg: SparseKernelConfig, grid: SupportGrid, q: np.ndarray):
    keys = grid._keys(q)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    rows, cols, vals = [], [], []
    for u_i, key in enumerate(map(tuple, uniq)):
        qi = np.flatnonzero(inverse == u_i)
        cand = grid._hood.get(key, grid._empty)
        if not len(cand):
            continue
        dist = np.linalg.norm(grid.offsets(q[qi], cand), axis=-1)
        k = kernel_eval(cfg, np.minimum(dist, cfg.D))
        r, c = np.nonzero(k > 0)
        rows.append(qi[r])
        cols.append(cand[c])
        vals.append(k[r, c])
    if not rows:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0)
    return tuple(map(np.concatenate, (rows, cols, vals)))
