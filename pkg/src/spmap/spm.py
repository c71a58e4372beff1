"""The semantic property map.

State is a product of one Dirichlet per support point (class weights) and
one normal-gamma per class (property mean and precision).  Camera semantics
update the Dirichlets in closed form.  A property measurement turns the
posterior into a mixture over (support point, class) pairs, which is projected
back onto the product family by matching the sufficient moments.

Class labels are 0-based internally; external files use 1-based labels.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .errors import CoverageError, DegenerateMomentsError
from .kernels import (
    InterpWeights,
    SparseKernelConfig,
    SupportGrid,
    interp_matrix,
    interp_weights,
    interp_weights_grad,
)

FORMAT_VERSION = 1
DIRICHLET_FLOOR = 1e-8
COLLAPSE_TOL = 1e-12
JENSEN_TOL = 1e-14
DEFAULT_VAR_CAP = 1.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SpmParams:
    """Map parameters: Dirichlet concentrations ``(L, K)`` and per-class normal-gamma."""

    dirichlet: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.dirichlet = np.array(self.dirichlet, dtype=float, ndmin=2)
        for name in ("mu", "lam", "alpha", "beta"):
            setattr(self, name, np.array(getattr(self, name), dtype=float).reshape(-1))
        K = self.dirichlet.shape[1]
        if any(len(getattr(self, n)) != K for n in ("mu", "lam", "alpha", "beta")):
            raise ValueError("class parameter arrays must have length K")

    @property
    def K(self) -> int:
        return self.dirichlet.shape[1]

    @property
    def L(self) -> int:
        return self.dirichlet.shape[0]

    @classmethod
    def uniform(cls, L: int, a, mu, lam, alpha, beta) -> "SpmParams":
        a = np.asarray(a, dtype=float)
        return cls(np.tile(a, (L, 1)), mu, lam, alpha, beta)

    def copy(self) -> "SpmParams":
        return SpmParams(self.dirichlet.copy(), self.mu.copy(), self.lam.copy(),
                         self.alpha.copy(), self.beta.copy())

    def validate(self) -> None:
        if not np.all(self.dirichlet > 0):
            raise ValueError("Dirichlet concentrations must be positive")
        if not (np.all(self.lam >= 0) and np.all(self.alpha > 0) and np.all(self.beta > 0)):
            raise ValueError("normal-gamma parameters out of range")
        if not all(np.all(np.isfinite(x)) for x in (self.dirichlet, self.mu, self.lam, self.alpha, self.beta)):
            raise ValueError("parameters must be finite")

    def class_table(self) -> np.ndarray:
        return np.column_stack([self.mu, self.lam, self.alpha, self.beta])


@dataclass(frozen=True)
class SemanticMeasurement:
    label: int
    s: float
    e: float

    @property
    def location(self):
        return (self.s, self.e)


@dataclass(frozen=True)
class PropertyMeasurement:
    y: float
    s: float
    e: float

    @property
    def location(self):
        return (self.s, self.e)


@dataclass
class PosteriorMixture:
    """Exact posterior after one property measurement.

    Components are indexed by (row of ``ell``, class ``j``); ``log_w`` holds
    ``log(I_l * u_j^l * c_j)`` and ``log_norm`` its log-sum-exp.
    """

    ell: np.ndarray
    interp: np.ndarray
    log_w: np.ndarray
    log_norm: float
    mu: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    log_c: np.ndarray

    @property
    def responsibilities(self) -> np.ndarray:
        return np.exp(self.log_w - self.log_norm)


@dataclass
class MomentSet:
    """Sufficient moments of the map family under some distribution.

    Besides the raw moments, the stable Jensen gaps (``tau_var``,
    ``m2tau_gap``, ``w_var``, ``w_gap = E[w] - E[w^2]``) are stored because
    forming them from raw moments cancels catastrophically once ``alpha``
    is large.  ``class_exact``/``dirichlet_exact`` hold exact parameters
    (NaN otherwise) for entries whose posterior collapsed onto one component.
    """

    m: np.ndarray
    tau: np.ndarray
    tau2: np.ndarray
    m2tau: np.ndarray
    ell: np.ndarray
    w: np.ndarray
    w2: np.ndarray
    tau_var: np.ndarray | None = None
    m2tau_gap: np.ndarray | None = None
    w_var: np.ndarray | None = None
    w_gap: np.ndarray | None = None
    class_mask: np.ndarray | None = None
    class_exact: np.ndarray | None = None
    dirichlet_exact: np.ndarray | None = None
    lam_fallback: np.ndarray | None = None


@dataclass
class ParamFragment:
    """Matched parameters for the touched part of the map."""

    mu: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    class_mask: np.ndarray
    ell: np.ndarray
    dirichlet: np.ndarray


def normal_gamma_moments(mu, lam, alpha, beta):
    """Closed-form E[m], E[tau], E[tau^2], E[m^2 tau] of NG(mu, lam, alpha, beta)."""
    mu, lam, alpha, beta = (np.asarray(x, dtype=float) for x in (mu, lam, alpha, beta))
    t = alpha / beta
    with np.errstate(divide="ignore"):
        inv_lam = 1.0 / lam
    return mu, t, alpha * (alpha + 1.0) / beta**2, inv_lam + mu**2 * t


def dirichlet_moments(a):
    a = np.asarray(a, dtype=float)
    a0 = a.sum(axis=-1, keepdims=True)
    return a / a0, a * (a + 1.0) / (a0 * (a0 + 1.0))


# -- updates -----------------------------------------------------------------


def semantic_update(P: SpmParams, m: SemanticMeasurement, w: InterpWeights, inplace: bool = False) -> SpmParams:
    if not 0 <= m.label < P.K:
        raise ValueError(f"class label {m.label} out of range for K={P.K}")
    out = P if inplace else P.copy()
    out.dirichlet[w.indices, m.label] += w.weights
    return out


def semantic_update_batch(P: SpmParams, labels, W, inplace: bool = False) -> SpmParams:
    """Apply many semantic measurements given their CSR interpolation matrix ``W``."""
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= P.K):
        raise ValueError("class label out of range")
    out = P if inplace else P.copy()
    rows = np.repeat(labels, np.diff(W.indptr))
    np.add.at(out.dirichlet, (W.indices, rows), W.data)
    return out


def property_posterior(P: SpmParams, m: PropertyMeasurement, w: InterpWeights) -> PosteriorMixture:
    y = float(m.y)
    if not math.isfinite(y):
        raise ValueError("property measurement must be finite")
    interp = np.asarray(w.weights, dtype=float)
    if not np.any(interp > 0):
        raise ValueError("interpolation weights are all zero")
    lam, mu, alpha, beta = P.lam, P.mu, P.alpha, P.beta
    lam_s = lam + 1.0
    mu_s = (lam * mu + y) / lam_s
    alpha_s = alpha + 0.5
    beta_s = beta + lam * (y - mu) ** 2 / (2.0 * lam_s)
    with np.errstate(divide="ignore"):
        log_c = (
            -0.5 * _LOG_2PI
            + 0.5 * (np.log(lam) - np.log(lam_s))
            + gammaln(alpha_s) - gammaln(alpha)
            + alpha * np.log(beta) - alpha_s * np.log(beta_s)
        )
        A = P.dirichlet[w.indices]
        log_u = np.log(A) - np.log(A.sum(axis=1, keepdims=True))
        log_i = np.log(interp)[:, None]
    log_w = log_i + log_u + log_c[None, :]
    log_norm = _logsumexp(log_w)
    if not math.isfinite(log_norm):
        # every class has an improper (lam = 0) marginal; keep semantic weights only
        log_w = log_i + log_u
        log_norm = _logsumexp(log_w)
    return PosteriorMixture(np.asarray(w.indices), interp, log_w, log_norm,
                            mu_s, lam_s, alpha_s, beta_s, log_c)


def _complement(x: np.ndarray) -> np.ndarray:
    # 1 - x_i for weights summing to one, formed from the other entries only
    c = np.cumsum(x)
    r = np.cumsum(x[::-1])[::-1]
    out = np.zeros_like(x)
    out[1:] += c[:-1]
    out[:-1] += r[1:]
    if len(x) == 1:
        out[0] = max(0.0, 1.0 - x[0])
    return out


def _logsumexp(a: np.ndarray) -> float:
    mx = a.max()
    if not np.isfinite(mx):
        return float(mx)
    return float(mx + math.log(np.exp(a - mx).sum()))


def posterior_moments(pm: PosteriorMixture, P: SpmParams) -> MomentSet:
    r = pm.responsibilities
    K = P.K
    rho = r.sum(axis=0)
    rest = _complement(rho)

    # normal-gamma part: updated component (weight rho) vs prior (weight rest)
    Em_u, Et_u, Et2_u, Emt_u = normal_gamma_moments(pm.mu, pm.lam, pm.alpha, pm.beta)
    Em_p, Et_p, Et2_p, Emt_p = normal_gamma_moments(P.mu, P.lam, P.alpha, P.beta)
    Em = rho * Em_u + rest * Em_p
    Et = rho * Et_u + rest * Et_p
    Et2 = rho * Et2_u + rest * Et2_p
    with np.errstate(invalid="ignore"):
        Emt = rho * Emt_u + np.where(rest > 0, rest * Emt_p, 0.0)
    tau_var = (rho * pm.alpha / pm.beta**2 + rest * P.alpha / P.beta**2
               + rho * rest * (Et_u - Et_p) ** 2)
    d_u, d_p = pm.mu - Em, P.mu - Em
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_lam_p = np.where(rest > 0, rest / P.lam, 0.0)
    m2tau_gap = (rho / pm.lam + inv_lam_p
                 + rho * d_u**2 * Et_u + rest * d_p**2 * Et_p
                 + 2.0 * Em * (rho * d_u * (Et_u - Et) + rest * d_p * (Et_p - Et)))

    class_mask = rho > COLLAPSE_TOL
    class_exact = np.full((K, 4), np.nan)
    collapsed = rest <= COLLAPSE_TOL
    class_exact[collapsed] = np.column_stack([pm.mu, pm.lam, pm.alpha, pm.beta])[collapsed]
    lam_fallback = rho * pm.lam + rest * P.lam

    # Dirichlet part, one row per touched support point
    a = P.dirichlet[pm.ell]
    n = len(pm.ell)
    R = r.sum(axis=1)
    rest_l = _complement(R)
    a0 = a.sum(axis=1, keepdims=True)
    Ep, E2p = a / a0, a * (a + 1.0) / (a0 * (a0 + 1.0))
    varp = a * (a0 - a) / (a0**2 * (a0 + 1.0))
    gapp = a * (a0 - a) / (a0 * (a0 + 1.0))
    b = a[:, None, :] + np.eye(K)[None, :, :]  # (n, j, i)
    b0 = (a0 + 1.0)[:, :, None]
    Eb = b / b0
    E2b = b * (b + 1.0) / (b0 * (b0 + 1.0))
    varb = b * (b0 - b) / (b0**2 * (b0 + 1.0))
    gapb = b * (b0 - b) / (b0 * (b0 + 1.0))
    rl = rest_l[:, None]
    Ew = rl * Ep + np.einsum("nj,nji->ni", r, Eb)
    Ew2 = rl * E2p + np.einsum("nj,nji->ni", r, E2b)
    w_gap = rl * gapp + np.einsum("nj,nji->ni", r, gapb)
    w_var = (rl * varp + np.einsum("nj,nji->ni", r, varb)
             + rl * (Ep - Ew) ** 2 + np.einsum("nj,nji->ni", r, (Eb - Ew[:, None, :]) ** 2))

    dir_exact = np.full((n, K), np.nan)
    untouched = R <= COLLAPSE_TOL
    dir_exact[untouched] = a[untouched]
    j_max = r.argmax(axis=1)
    one = r[np.arange(n), j_max] >= 1.0 - COLLAPSE_TOL
    dir_exact[one] = b[np.arange(n), j_max][one]
    if K == 1:
        # a one-class Dirichlet is a point mass; keep counting responsibility mass
        dir_exact = a + R[:, None]

    return MomentSet(Em, Et, Et2, Emt, np.asarray(pm.ell), Ew, Ew2,
                     tau_var=tau_var, m2tau_gap=m2tau_gap, w_var=w_var, w_gap=w_gap,
                     class_mask=class_mask, class_exact=class_exact,
                     dirichlet_exact=dir_exact, lam_fallback=lam_fallback)


def bmm_project(g: MomentSet) -> ParamFragment:
    """Normal-gamma and Dirichlet parameters matching the moments in ``g``."""
    K = len(g.m)
    tau_var = g.tau_var if g.tau_var is not None else g.tau2 - g.tau**2
    m_gap = g.m2tau_gap if g.m2tau_gap is not None else g.m2tau - g.m**2 * g.tau
    mask = g.class_mask if g.class_mask is not None else np.ones(K, dtype=bool)
    exact = g.class_exact if g.class_exact is not None else np.full((K, 4), np.nan)
    have_exact = ~np.isnan(exact[:, 0])

    degenerate = mask & ~have_exact & (tau_var < JENSEN_TOL)
    if degenerate.any():
        raise DegenerateMomentsError(f"vanishing precision variance for classes {np.flatnonzero(degenerate)}")
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = g.m.copy()
        alpha = g.tau**2 / tau_var
        beta = g.tau / tau_var
        lam = np.where(np.isinf(m_gap), 0.0, 1.0 / m_gap)
    bad_lam = ~(m_gap > 0)
    if bad_lam.any():
        if g.lam_fallback is None:
            raise DegenerateMomentsError("non-positive E[m^2 tau] - E[m]^2 E[tau]")
        lam = np.where(bad_lam, g.lam_fallback, lam)
    mu = np.where(have_exact, exact[:, 0], mu)
    lam = np.where(have_exact, exact[:, 1], lam)
    alpha = np.where(have_exact, exact[:, 2], alpha)
    beta = np.where(have_exact, exact[:, 3], beta)

    w_var = g.w_var if g.w_var is not None else g.w2 - g.w**2
    w_gap = g.w_gap if g.w_gap is not None else g.w - g.w2
    with np.errstate(divide="ignore", invalid="ignore"):
        a = g.w * w_gap / w_var
    if g.dirichlet_exact is not None:
        ex = ~np.isnan(g.dirichlet_exact[:, 0])
        a[ex] = g.dirichlet_exact[ex]
    else:
        ex = np.zeros(len(a), dtype=bool)
    if np.any(~ex[:, None] & ~(w_var >= JENSEN_TOL)):
        raise DegenerateMomentsError("vanishing Dirichlet weight variance")
    a = np.maximum(a, DIRICHLET_FLOOR)
    return ParamFragment(mu, lam, alpha, beta, mask.copy(), np.asarray(g.ell), a)


def apply_fragment(P: SpmParams, frag: ParamFragment, inplace: bool = False) -> SpmParams:
    out = P if inplace else P.copy()
    mk = frag.class_mask
    out.mu[mk] = frag.mu[mk]
    out.lam[mk] = frag.lam[mk]
    out.alpha[mk] = frag.alpha[mk]
    out.beta[mk] = frag.beta[mk]
    out.dirichlet[frag.ell] = frag.dirichlet
    return out


def property_update(P: SpmParams, m: PropertyMeasurement, w: InterpWeights, inplace: bool = False) -> SpmParams:
    pm = property_posterior(P, m, w)
    return apply_fragment(P, bmm_project(posterior_moments(pm, P)), inplace=inplace)


# -- externalization ---------------------------------------------------------


def class_predictive_var(P: SpmParams, var_cap: float = DEFAULT_VAR_CAP) -> np.ndarray:
    """Student-t predictive variance per class; ``var_cap`` where it is undefined."""
    ok = (P.alpha > 1.0) & (P.lam > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = P.beta / (P.alpha - 1.0) * (P.lam + 1.0) / P.lam
    return np.where(ok, v, var_cap)


def _point_constants(P: SpmParams, idx, var_cap):
    A = P.dirichlet[idx]
    wbar = A / A.sum(axis=1, keepdims=True)
    var = class_predictive_var(P, var_cap)
    return wbar, wbar @ P.mu, wbar @ (var + P.mu**2)


def predict_moments(P: SpmParams, v, grid: SupportGrid, cfg: SparseKernelConfig,
                    var_cap: float = DEFAULT_VAR_CAP) -> tuple[float, float]:
    """Mean and variance of the property likelihood at ``v``."""
    w = interp_weights(cfg, grid, v)
    _, C, D2 = _point_constants(P, w.indices, var_cap)
    m = float(w.weights @ C)
    return m, float(w.weights @ D2 - m * m)


def predict_moments_grad(P: SpmParams, v, grid: SupportGrid, cfg: SparseKernelConfig,
                         var_cap: float = DEFAULT_VAR_CAP):
    """``(m, V, dm/dv, dV/dv)`` using the analytic kernel chain rule."""
    w, dw = interp_weights_grad(cfg, grid, v)
    _, C, D2 = _point_constants(P, w.indices, var_cap)
    m = float(w.weights @ C)
    V = float(w.weights @ D2 - m * m)
    dm = dw.T @ C
    dV = dw.T @ D2 - 2.0 * m * dm
    return m, V, dm, dV


def class_likelihoods(P: SpmParams, v, grid: SupportGrid, cfg: SparseKernelConfig) -> np.ndarray:
    w = interp_weights(cfg, grid, v)
    A = P.dirichlet[w.indices]
    return w.weights @ (A / A.sum(axis=1, keepdims=True))


def predict_many(P: SpmParams, W, var_cap: float = DEFAULT_VAR_CAP):
    """Vectorized ``(m_y, V_y, class probabilities)`` for rows of a CSR weight matrix."""
    wbar = P.dirichlet / P.dirichlet.sum(axis=1, keepdims=True)
    var = class_predictive_var(P, var_cap)
    m = W @ (wbar @ P.mu)
    V = W @ (wbar @ (var + P.mu**2)) - m * m
    return m, V, W @ wbar


# -- stateful map --------------------------------------------------------------


@dataclass
class UpdateStats:
    semantic: int = 0
    property: int = 0
    dropped: int = 0


class SemanticPropertyMap:
    """Single-writer map with versioned snapshots.

    Writers and readers serialize on one lock, so a reader never observes a
    half-applied update.  Measurements outside kernel coverage are dropped and
    counted unless ``strict`` is set.
    """

    def __init__(self, params: SpmParams, grid: SupportGrid, kernel: SparseKernelConfig,
                 var_cap: float = DEFAULT_VAR_CAP, strict: bool = False):
        if params.L != len(grid):
            raise ValueError(f"params have L={params.L} but grid has {len(grid)} points")
        self.params = params
        self.grid = grid
        self.kernel = kernel
        self.var_cap = var_cap
        self.strict = strict
        self.version = 0
        self.stats = UpdateStats()
        self._lock = threading.RLock()

    @property
    def K(self) -> int:
        return self.params.K

    def _weights(self, v) -> InterpWeights | None:
        try:
            return interp_weights(self.kernel, self.grid, v)
        except CoverageError:
            if self.strict:
                raise
            self.stats.dropped += 1
            return None

    def add_semantic(self, m: SemanticMeasurement) -> bool:
        w = self._weights(m.location)
        if w is None:
            return False
        with self._lock:
            semantic_update(self.params, m, w, inplace=True)
            self.version += 1
            self.stats.semantic += 1
        return True

    def add_semantic_batch(self, labels, locations) -> int:
        W, covered = interp_matrix(self.kernel, self.grid, np.asarray(locations, dtype=float).reshape(-1, 2))
        n_bad = int((~covered).sum())
        if n_bad and self.strict:
            raise CoverageError(f"{n_bad} semantic measurements outside kernel coverage")
        with self._lock:
            semantic_update_batch(self.params, labels, W, inplace=True)
            self.version += 1
            self.stats.semantic += int(covered.sum())
            self.stats.dropped += n_bad
        return int(covered.sum())

    def add_property(self, m: PropertyMeasurement) -> bool:
        w = self._weights(m.location)
        if w is None:
            return False
        with self._lock:
            property_update(self.params, m, w, inplace=True)
            self.version += 1
            self.stats.property += 1
        return True

    def snapshot(self) -> tuple[int, SpmParams]:
        with self._lock:
            return self.version, self.params.copy()

    def predict(self, v) -> tuple[float, float]:
        with self._lock:
            return predict_moments(self.params, v, self.grid, self.kernel, self.var_cap)

    def class_probs(self, v) -> np.ndarray:
        with self._lock:
            return class_likelihoods(self.params, v, self.grid, self.kernel)

    def export(self, s_range, e_range, resolution: float):
        """Dense externalization over a cell-centered (s, e) grid.

        Returns a dict of equal-length arrays ``s, e, m_y, V_y, p`` (p is
        ``(n, K)``); uncovered cells hold NaN.
        """
        s0, s1 = s_range
        e0, e1 = e_range
        ns = max(1, int(round((s1 - s0) * resolution)))
        ne = max(1, int(round((e1 - e0) * resolution)))
        s = s0 + (np.arange(ns) + 0.5) * (s1 - s0) / ns
        e = e0 + (np.arange(ne) + 0.5) * (e1 - e0) / ne
        S, E = np.meshgrid(s, e, indexing="ij")
        q = np.column_stack([S.ravel(), E.ravel()])
        W, covered = interp_matrix(self.kernel, self.grid, q)
        with self._lock:
            m, V, p = predict_many(self.params, W, self.var_cap)
        m[~covered] = np.nan
        V[~covered] = np.nan
        p[~covered] = np.nan
        return {"s": q[:, 0], "e": q[:, 1], "m_y": m, "V_y": V, "p": p}

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        with self._lock:
            P = self.params
            return {
                "format_version": FORMAT_VERSION,
                "K": P.K,
                "L": P.L,
                "layout": self.grid.descriptor(),
                "kernel": {"D": self.kernel.D, "sigma": self.kernel.sigma},
                "var_cap": self.var_cap,
                "version": self.version,
                "dirichlet": P.dirichlet.tolist(),
                "classes": P.class_table().tolist(),
            }

    @classmethod
    def from_dict(cls, doc: dict) -> "SemanticPropertyMap":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported map format_version {doc.get('format_version')!r}")
        grid = SupportGrid.from_descriptor(doc["layout"])
        table = np.asarray(doc["classes"], dtype=float).reshape(-1, 4)
        P = SpmParams(np.asarray(doc["dirichlet"], dtype=float).reshape(doc["L"], doc["K"]),
                      table[:, 0], table[:, 1], table[:, 2], table[:, 3])
        kernel = SparseKernelConfig(**doc["kernel"])
        out = cls(P, grid, kernel, var_cap=doc.get("var_cap", DEFAULT_VAR_CAP))
        out.version = int(doc.get("version", 0))
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SemanticPropertyMap":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
