"""Evaluation metrics: decile quantile score, MAE/MSE, crossing rate,
coverage and (on synthetic data) the gap to the true quantiles."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import inference
from .losses import pinball
from .sampler import DECILES

CROSSING_GRID = inference.mean_grid(99)  # 101 levels on [0.01, 0.99]


def qs_from_predictions(y, preds, taus=DECILES):
    """(q_s, per-level mean pinball) for an n x len(taus) prediction matrix."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    preds = np.asarray(preds, dtype=np.float64)
    per = [float(np.mean(pinball(t, y[:, 0], preds[:, j]))) for j, t in enumerate(taus)]
    return float(sum(per)), per


def decile_predictions(predictor, x, mode="q", alpha=0.5, taus=DECILES):
    if mode == "q":
        return inference.quantile_curves(predictor, taus, x)
    return np.column_stack([inference.quantile(predictor, t, x, mode, alpha) for t in taus])


def qs_score(predictor, x, y, mode="q", alpha=0.5, taus=DECILES):
    """Sum over the nine deciles of the mean pinball loss."""
    return qs_from_predictions(y, decile_predictions(predictor, x, mode, alpha, taus), taus)


def _errors(pred, target):
    e = np.asarray(pred, dtype=np.float64).reshape(-1) - np.asarray(target, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("empty prediction set")
    return e


def mae(pred, target):
    if np.size(pred) != np.size(target):
        raise ValueError("predictions and targets differ in length")
    return float(np.mean(np.abs(_errors(pred, target))))


def mse(pred, target):
    if np.size(pred) != np.size(target):
        raise ValueError("predictions and targets differ in length")
    return float(np.mean(_errors(pred, target) ** 2))


def crossing_fraction(curves):
    """Fraction of adjacent level pairs whose predictions decrease."""
    curves = np.asarray(curves, dtype=np.float64)
    if curves.shape[1] < 2:
        raise ValueError("need at least two levels")
    return float(np.mean(np.diff(curves, axis=1) < 0))


def crossing_rate(model, x, taus=CROSSING_GRID):
    taus = np.asarray(taus, dtype=np.float64).reshape(-1)
    if taus.size < 2:
        raise ValueError("tau grid needs at least two points")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("tau grid must be sorted ascending")
    return crossing_fraction(inference.quantile_curves(model, taus, x))


def coverage(predictor, x, y, taus=DECILES, mode="q", alpha=0.5):
    """Per-level fraction of rows with y <= predicted quantile."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return {float(t): float(np.mean(y <= inference.quantile(predictor, t, x, mode, alpha))) for t in taus}


def recover_errors(model, x, y, taus=DECILES):
    """Mean |tau - F(Q(tau))| over deciles, and mean |y - Q(F(y))| at observed targets."""
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(-1, 1) if x.ndim == 1 else x
    n = x.shape[0]
    t = np.repeat(np.asarray(taus, dtype=np.float64), n)
    xx = np.tile(x, (len(taus), 1))
    q = model.q_forward(t, xx)
    rq = float(np.mean(np.abs(t - model.f_forward(q, xx)[1])))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p = model.f_forward(y, x)[1]
    rf = float(np.mean(np.abs(y - model.q_forward(p, x))))
    return rq, rf


def oracle_gap(predictor, x_std, x_raw, oracle, taus=DECILES, mode="q", alpha=0.5):
    """Per-level mean |Q_hat - Q_true| in original target units."""
    gaps = {}
    for t in taus:
        pred = inference.quantile(predictor, t, x_std, mode, alpha, destandardize=True)
        gaps[float(t)] = float(np.mean(np.abs(pred - oracle(t, x_raw))))
    return gaps


@dataclass
class EvalReport:
    q_s: float
    per_decile: list
    mae: float
    mse: float
    crossing_rate: float
    coverage: dict
    recover_Q: float | None = None
    recover_F: float | None = None
    inference_mode: str = "q"
    units: str = "standardized"
    n: int = 0
    oracle_gap: dict | None = field(default=None)

    def to_json(self):
        d = asdict(self)
        d["coverage"] = {repr(k): v for k, v in self.coverage.items()}
        if self.oracle_gap is not None:
            d["oracle_gap"] = {repr(k): v for k, v in self.oracle_gap.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def csv_row(self):
        cols = {"q_s": self.q_s, "mae": self.mae, "mse": self.mse, "crossing_rate": self.crossing_rate,
                "recover_Q": self.recover_Q, "recover_F": self.recover_F,
                "inference_mode": self.inference_mode, "units": self.units, "n": self.n}
        for t, v in zip(DECILES, self.per_decile):
            cols[f"pinball_q{int(round(t * 100))}"] = v
        for t, v in self.coverage.items():
            cols[f"coverage_q{int(round(t * 100))}"] = v
        if self.oracle_gap is not None:
            for t, v in self.oracle_gap.items():
                cols[f"oracle_gap_q{int(round(t * 100))}"] = v
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(cols), lineterminator="\n")
        w.writeheader()
        w.writerow(cols)
        return buf.getvalue()


SUMMARY_FIELDS = ("q_s", "mae", "mse", "crossing_rate", "recover_Q", "recover_F")


def summarize(reports):
    """Mean and sample standard deviation of the scalar fields over replicate reports."""
    out = {}
    for name in SUMMARY_FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not vals:
            continue
        out[name] = {"mean": float(np.mean(vals)),
                     "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, "n": len(vals)}
    return out


def evaluate(predictor, x, y, mode="q", alpha=0.5, original_units=False, oracle=None, x_raw=None):
    """Full report on standardized ``x``/``y``.

    Fixed-level baselines have no arbitrary-level head: their crossing rate
    is measured across their own levels and their mean estimate is the
    median prediction.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    fixed = hasattr(predictor, "taus")
    if fixed and mode != "q":
        raise ValueError("fixed-level baselines have no CDF head for dual inference")
    preds = decile_predictions(predictor, x, mode, alpha)
    median = inference.quantile(predictor, 0.5, x, mode, alpha)
    if fixed:
        mean = median
        cross = crossing_fraction(inference.quantile_curves(predictor, sorted(predictor.taus), x))
        rq = rf = None
    else:
        mean = inference.predict_mean(predictor, x, 99, mode, alpha)
        cross = crossing_rate(predictor, x) if mode == "q" else crossing_fraction(
            np.column_stack([inference.quantile(predictor, t, x, mode, alpha) for t in CROSSING_GRID]))
        rq, rf = recover_errors(predictor, x, y)
    target = y
    if original_units:
        s = predictor.stats
        preds, median, mean, target = s.inverse_y(preds), s.inverse_y(median), s.inverse_y(mean), s.inverse_y(y)
    qs, per = qs_from_predictions(target, preds)
    cov = {float(t): float(np.mean(y_ <= p_)) for t, y_, p_ in
           ((t, target, preds[:, j]) for j, t in enumerate(DECILES))}
    gap = None
    if oracle is not None:
        if x_raw is None:
            raise ValueError("oracle comparison needs raw feature values")
        gap = oracle_gap(predictor, x, x_raw, oracle, DECILES, mode, alpha)
    return EvalReport(
        q_s=qs, per_decile=per, mae=mae(median, target), mse=mse(mean, target),
        crossing_rate=cross, coverage=cov, recover_Q=rq, recover_F=rf,
        inference_mode=mode, units="original" if original_units else "standardized",
        n=int(y.size), oracle_gap=gap,
    )
