"""Comparison predictors: a random-walk Kalman filter and a windowed GP.

Both consume property measurements only and ignore semantics.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import FitError, NumericalError

GP_JITTER = 1e-8
HORIZON_N = 80


@dataclass(frozen=True)
class KfState:
    mean: float
    variance: float
    q: float = 1e-5
    r: float = 0.02**2

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        if not (self.q > 0 and self.r > 0):
            raise ValueError("noise variances must be positive")


def kf_update(state: KfState, y: float) -> KfState:
    """Random-walk predict (variance += q) followed by a scalar measurement update."""
    p = state.variance + state.q
    if np.isinf(state.r):
        return replace(state, variance=p)
    gain = p / (p + state.r)
    return replace(state, mean=state.mean + gain * (y - state.mean), variance=(1.0 - gain) * p)


def kf_predict_horizon(state: KfState, n: int = HORIZON_N):
    """Means and variances at ``n`` horizon steps; the mean cannot vary in space."""
    steps = np.arange(1, n + 1)
    return np.full(n, state.mean), state.variance + state.q * steps


@dataclass(frozen=True)
class GpHyper:
    length_s: float
    length_e: float
    signal_var: float
    noise_var: float

    def __post_init__(self):
        if min(self.length_s, self.length_e, self.signal_var) <= 0 or self.noise_var < 0:
            raise ValueError("GP hyperparameters must be positive")

    @classmethod
    def from_log(cls, theta) -> "GpHyper":
        return cls(*(float(x) for x in np.exp(np.asarray(theta, dtype=float))))

    def to_log(self) -> np.ndarray:
        return np.log([self.length_s, self.length_e, self.signal_var, max(self.noise_var, 1e-300)])


class GpWindow:
    """Property samples restricted to ``s0 - span < s < s0`` for the newest ``s0``.

    When more than ``cap`` samples are in the window the fit and prediction
    use a uniform thinning of them.
    """

    def __init__(self, span: float = 100.0, cap: int = 400):
        if span <= 0 or cap < 5:
            raise ValueError("window span must be positive and cap at least 5")
        self.span = float(span)
        self.cap = int(cap)
        self._data: deque[tuple[float, float, float]] = deque()
        self.s0: float | None = None

    def __len__(self):
        return len(self._data)

    def add(self, y: float, s: float, e: float) -> None:
        self._data.append((float(y), float(s), float(e)))
        self.s0 = float(s) if self.s0 is None else max(self.s0, float(s))
        self.evict(self.s0)

    def evict(self, s0: float) -> None:
        lo = s0 - self.span
        self._data = deque(d for d in self._data if lo < d[1] <= s0)

    def arrays(self):
        """``(X, y)`` with ``X = [[s, e], ...]`` after thinning to ``cap``."""
        if not self._data:
            return np.zeros((0, 2)), np.zeros(0)
        D = np.array(self._data)
        if len(D) > self.cap:
            D = D[np.unique(np.linspace(0, len(D) - 1, self.cap).round().astype(int))]
        return D[:, 1:3], D[:, 0]


def rbf(X1: np.ndarray, X2: np.ndarray, h: GpHyper) -> np.ndarray:
    d_s = (X1[:, None, 0] - X2[None, :, 0]) / h.length_s
    d_e = (X1[:, None, 1] - X2[None, :, 1]) / h.length_e
    return h.signal_var * np.exp(-0.5 * (d_s**2 + d_e**2))


def neg_log_marginal_likelihood(theta, X: np.ndarray, y: np.ndarray) -> float:
    """Negative log marginal likelihood of centered ``y`` under log-parameters ``theta``."""
    theta = np.clip(theta, -25.0, 25.0)
    h = GpHyper.from_log(theta)
    r = y - y.mean()
    C = rbf(X, X, h) + (h.noise_var + GP_JITTER) * np.eye(len(y))
    try:
        c, low = cho_factor(C, lower=True)
    except LinAlgError:
        return 1e25
    alpha = cho_solve((c, low), r)
    return float(0.5 * r @ alpha + np.log(np.diag(c)).sum() + 0.5 * len(y) * np.log(2 * np.pi))


def _as_xy(data):
    if isinstance(data, GpWindow):
        return data.arrays()
    X, y = data
    return np.asarray(X, dtype=float).reshape(-1, 2), np.asarray(y, dtype=float)


def gp_fit(data, starts: int = 3, maxiter: int = 200, trace: list | None = None) -> GpHyper:
    """Maximize the marginal likelihood with multi-start Nelder-Mead over log-parameters.

    ``data`` is a :class:`GpWindow` or an ``(X, y)`` pair.  ``trace``, if
    given, receives the objective value after every accepted iteration.
    """
    X, y = _as_xy(data)
    if len(y) < 5:
        raise FitError(f"GP fit needs at least 5 points, got {len(y)}")
    v = max(float(np.var(y)), 1e-6)
    inits = [
        np.log([20.0, 2.0, v, 0.1 * v]),
        np.log([50.0, 5.0, v, 0.5 * v]),
        np.log([5.0, 1.0, v, 0.01 * v]),
    ][:starts]
    best = None
    for x0 in inits:
        cb = None
        if trace is not None:
            run: list[float] = []
            trace.append(run)
            cb = lambda xk, run=run: run.append(neg_log_marginal_likelihood(xk, X, y))
        res = minimize(neg_log_marginal_likelihood, x0, args=(X, y), method="Nelder-Mead",
                       callback=cb, options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-8})
        if best is None or res.fun < best.fun:
            best = res
    return GpHyper.from_log(np.clip(best.x, -25.0, 25.0))


def gp_predict(data, h: GpHyper, queries, return_var: bool = False):
    """GP posterior mean at ``queries`` (n, 2) with the training mean as prior mean."""
    X, y = _as_xy(data)
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    if len(y) == 0:
        raise FitError("no training data")
    mean = y.mean()
    C = rbf(X, X, h) + (h.noise_var + GP_JITTER) * np.eye(len(y))
    try:
        cf = cho_factor(C, lower=True)
    except LinAlgError as exc:
        raise NumericalError("GP covariance not positive definite after jitter") from exc
    Ks = rbf(Q, X, h)
    mu = mean + Ks @ cho_solve(cf, y - mean)
    if not return_var:
        return mu
    var = h.signal_var - np.einsum("ij,ji->i", Ks, cho_solve(cf, Ks.T))
    return mu, np.maximum(var, 0.0)
