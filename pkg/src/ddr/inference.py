"""Prediction from a trained model: quantiles, CDF values, F-inversion,
blended (dual) quantiles and mean/median recovery.

Everything works in standardized units unless ``destandardize=True``;
``model`` is anything with ``q_forward``/``f_forward`` and a ``stats``
attribute holding the training target bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("q", "dual", "f")
MEAN_LO, MEAN_HI = 0.01, 0.99


@dataclass
class Inversion:
    value: np.ndarray
    saturated: np.ndarray


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def _check_tau(tau):
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(~np.isfinite(tau)) or np.any((tau <= 0) | (tau >= 1)):
        raise ValueError("tau must lie strictly inside (0, 1)")
    return tau


def _maybe_destd(model, v, destandardize):
    return model.stats.inverse_y(v) if destandardize else v


def predict_quantile(model, tau, x, destandardize=False):
    tau = _check_tau(tau)
    return _maybe_destd(model, model.q_forward(tau, _rows(x)), destandardize)


def quantile_curves(model, taus, x, destandardize=False):
    """n x len(taus) matrix of Q(tau_j, x_i) from one stacked forward pass."""
    taus = _check_tau(np.asarray(taus, dtype=np.float64).reshape(-1))
    x = _rows(x)
    n = x.shape[0]
    if hasattr(model, "taus"):  # fixed-level baselines
        out = np.column_stack([model.q_forward(t, x) for t in taus])
    else:
        out = model.q_forward(np.repeat(taus, n), np.tile(x, (taus.size, 1))).reshape(taus.size, n).T
    return _maybe_destd(model, out, destandardize)


def predict_cdf(model, ytilde, x, original_units=False):
    """F(ytilde | x), strictly inside (0, 1); usable as an anomaly score."""
    ytilde = np.asarray(ytilde, dtype=np.float64)
    if original_units:
        ytilde = model.stats.transform_y(ytilde)
    return model.f_forward(ytilde, _rows(x))[1]


def search_interval(stats):
    lo, hi = stats.ytilde_min, stats.ytilde_max
    pad = 0.5 * (hi - lo)
    return lo - pad, hi + pad


def invert_f(model, tau, x, tol=1e-6, max_iter=200, bounds=None):
    """Solve F(y, x) = tau for y by bisection on sign(F - tau).

    Rows where F - tau keeps one sign over the whole interval return the
    endpoint with the smaller |F - tau| and are flagged as saturated.
    """
    if not tol > 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    x = _rows(x)
    n = x.shape[0]
    tau = _check_tau(tau).reshape(-1)
    tau = np.full(n, tau[0]) if tau.size == 1 else tau
    if tau.size != n:
        raise ValueError(f"got {tau.size} levels for {n} rows")
    lo_b, hi_b = bounds if bounds is not None else search_interval(model.stats)
    lo = np.full(n, float(lo_b))
    hi = np.full(n, float(hi_b))
    g_lo = model.f_forward(lo, x)[1] - tau
    g_hi = model.f_forward(hi, x)[1] - tau
    saturated = np.sign(g_lo) * np.sign(g_hi) > 0
    value = np.where(np.abs(g_lo) <= np.abs(g_hi), lo, hi)
    exact_lo, exact_hi = g_lo == 0, g_hi == 0
    active = ~saturated & ~exact_lo & ~exact_hi
    value[exact_lo] = lo[exact_lo]
    value[exact_hi & ~exact_lo] = hi[exact_hi & ~exact_lo]
    s_lo = np.sign(g_lo)
    it = 0
    while np.any(active) and it < max_iter:
        idx = np.flatnonzero(active)
        mid = 0.5 * (lo[idx] + hi[idx])
        g = model.f_forward(mid, x[idx])[1] - tau[idx]
        same = np.sign(g) == s_lo[idx]
        lo[idx] = np.where(same, mid, lo[idx])
        hi[idx] = np.where(same, hi[idx], mid)
        hit = g == 0
        value[idx[hit]] = mid[hit]
        active[idx[hit]] = False
        done = ~hit & (hi[idx] - lo[idx] < tol)
        value[idx[done]] = 0.5 * (lo[idx[done]] + hi[idx[done]])
        active[idx[done]] = False
        it += 1
    rest = np.flatnonzero(active)
    value[rest] = 0.5 * (lo[rest] + hi[rest])
    return Inversion(value, saturated)


def dual_predict_quantile(model, tau, x, alpha=0.5, tol=1e-6, destandardize=False):
    """alpha * Q(tau, x) + (1 - alpha) * F^-1(tau, x)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x = _rows(x)
    if alpha == 1.0:
        out = model.q_forward(_check_tau(tau), x)
    elif alpha == 0.0:
        out = invert_f(model, tau, x, tol).value
    else:
        out = alpha * model.q_forward(_check_tau(tau), x) + (1.0 - alpha) * invert_f(model, tau, x, tol).value
    return _maybe_destd(model, out, destandardize)


def quantile(model, tau, x, mode="q", alpha=0.5, tol=1e-6, destandardize=False):
    """Dispatch on inference mode: direct Q, F-inversion, or the blend."""
    if mode == "q":
        return predict_quantile(model, tau, x, destandardize)
    if mode == "f":
        return dual_predict_quantile(model, tau, x, 0.0, tol, destandardize)
    if mode == "dual":
        return dual_predict_quantile(model, tau, x, alpha, tol, destandardize)
    raise ValueError(f"unknown inference mode {mode!r}; expected one of {MODES}")


def mean_grid(n):
    """n + 2 equally spaced levels from 0.01 to 0.99."""
    if n < 2:
        raise ValueError("n must be >= 2")
    return MEAN_LO + (MEAN_HI - MEAN_LO) * np.arange(n + 2) / (n + 1)


def trapezoid_mean(values):
    """Trapezoid average of rows of quantile values on the ``mean_grid`` levels.

    The integral over [0.01, 0.99] is divided by the interval length so a
    constant quantile function returns that constant.
    """
    v = np.asarray(values, dtype=np.float64)
    m = v.shape[-1]
    w = np.full(m, 2.0)
    w[0] = w[-1] = 1.0
    # delta / 2 * sum(w v) / (0.99 - 0.01) with delta = 0.98 / (m - 1);
    # offset by the first node so a constant row comes back bit-exact
    v0 = v[..., :1]
    return v0[..., 0] + ((v - v0) @ w) / (2.0 * (m - 1))


def predict_mean(model, x, n=99, mode="q", alpha=0.5, tol=1e-6, destandardize=False):
    """Conditional mean as the normalized trapezoid integral of Q over [0.01, 0.99]."""
    taus = mean_grid(n)
    x = _rows(x)
    rows = x.shape[0]
    if mode == "q":
        vals = quantile_curves(model, taus, x)
    else:
        flat = quantile(model, np.repeat(taus, rows), np.tile(x, (taus.size, 1)), mode, alpha, tol)
        vals = flat.reshape(taus.size, rows).T
    return _maybe_destd(model, trapezoid_mean(vals), destandardize)


def predict_median(model, x, mode="q", alpha=0.5, tol=1e-6, destandardize=False):
    return quantile(model, 0.5, x, mode, alpha, tol, destandardize)
