"""Training loops for the joint / disjoint / quantile-only models and the
fixed-level baselines."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import inference, metrics
from .data import TRAIN, VAL, DataError, split_indices
from .losses import ACTIVE, COMPONENTS, EPS_TAU, EPS_Y, LossBreakdown, LossGraph, QuantileSetGraph
from .network import ArchSpec, DdrModel, FixedQuantileNet, QuantileNetSet, is_regression_param
from .sampler import DECILES, Sampler, SamplerConfig, empirical_deciles

log = logging.getLogger(__name__)

TRAIN_MODES = ("ddr-joint", "ddr-disjoint", "ddr-q", "fcnn", "fcnn-joint")
MC_TERMS = ("pinball_mc", "pinball_anchor", "cdf_nll_mc", "cdf_nll_anchor")
REG_TERMS = ("grad_Q", "grad_F", "recover_Q", "recover_F", "dual_Q", "dual_F")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Loss-weight annealing.

@dataclass(frozen=True)
class Ramp:
    start: float
    end: float
    begin: float = 0.0
    finish: float = 0.0

    def __post_init__(self):
        if self.start < 0 or self.end < 0:
            raise ValueError("weights must be >= 0")
        if not 0.0 <= self.begin <= self.finish <= 1.0:
            raise ValueError("ramp interval must satisfy 0 <= begin <= finish <= 1")

    def at(self, frac):
        if frac >= self.finish:
            return self.end
        if frac <= self.begin:
            return self.start
        return self.start + (self.end - self.start) * (frac - self.begin) / (self.finish - self.begin)


def default_ramps(end_weights=None):
    end = {c: 1.0 for c in COMPONENTS}
    end.update(end_weights or {})
    ramps = {"median": Ramp(end["median"], end["median"])}
    for c in MC_TERMS:
        ramps[c] = Ramp(0.0, end[c], 0.0, 0.25)
    for c in REG_TERMS:
        ramps[c] = Ramp(0.0, end[c], 0.0, 0.5)
    return ramps


@dataclass
class AnnealSchedule:
    ramps: dict = field(default_factory=default_ramps)

    def __post_init__(self):
        missing = set(COMPONENTS) - set(self.ramps)
        if missing:
            raise ValueError(f"schedule lacks ramps for {sorted(missing)}")
        med = self.ramps["median"]
        first = min((r.finish for n, r in self.ramps.items() if n != "median" and r.finish > 0), default=0.0)
        for f in (0.0, first / 2, first):
            if med.at(f) < med.end:
                raise ValueError("median weight must not drop below its end value during the first ramp")

    @classmethod
    def constant(cls, weights=None):
        w = {c: 1.0 for c in COMPONENTS}
        w.update(weights or {})
        return cls({c: Ramp(w[c], w[c]) for c in COMPONENTS})


def anneal_weights(schedule, step, total_steps):
    """Per-component weights at ``step`` of ``total_steps``."""
    if total_steps < 0 or not 0 <= step <= max(total_steps, 0):
        raise ValueError(f"step {step} outside 0..{total_steps}")
    frac = step / total_steps if total_steps > 0 else 1.0
    return {c: schedule.ramps[c].at(frac) for c in COMPONENTS}


# ---------------------------------------------------------------------------
# Optimizer.

class Adam:
    """Adam with bias correction; each parameter keeps its own step count so
    parameters updated on a slower cadence stay correctly bias-corrected."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params, grads, names=None, lr=None):
        lr = self.lr if lr is None else lr
        names = list(grads) if names is None else names
        for n in names:
            g = grads[n]
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {n}")
            if params[n].shape != g.shape:
                raise ValueError(f"{n}: gradient shape {g.shape} != parameter shape {params[n].shape}")
            t = self.t.get(n, 0) + 1
            m = self.beta1 * self.m.get(n, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(n, 0.0) + (1.0 - self.beta2) * g * g
            self.m[n], self.v[n], self.t[n] = m, v, t
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            params[n] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def step_optimizer(params, grads, state, lr, update_regression=True):
    """Functional form: feature-part parameters always, regression part when asked."""
    names = [n for n in grads if update_regression or not is_regression_param(n)]
    return state.step(params, grads, names, lr)


# ---------------------------------------------------------------------------
# Configuration and report.

@dataclass
class TrainConfig:
    mode: str = "ddr-joint"
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    val_fraction: float = 0.2
    patience: int = 20
    seed: int = 0
    update_ratio: int = 2
    feature_widths: list = field(default_factory=lambda: [256, 256])
    regression_widths: list = field(default_factory=lambda: [256])
    injection: str = "linear"
    loss_weights: dict = field(default_factory=dict)
    eps_tau: float = EPS_TAU
    eps_y: float = EPS_Y
    recover_grad: str = "inner"
    tau_prior: str = "uniform"
    beta_a: float = 1.0
    beta_b: float = 1.0
    alpha: float = 0.5
    select_inference: bool = False
    val_crossing_rows: int = 512
    max_steps: int | None = None

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {TRAIN_MODES}")
        if not 0.0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.update_ratio < 1:
            raise ValueError("update_ratio must be >= 1")
        unknown = set(self.loss_weights) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    mode: str
    config: dict
    epochs: list = field(default_factory=list)
    initial_val: dict = field(default_factory=dict)
    selected_epoch: int = 0
    best_val_qs: float = math.inf
    inference_mode: str = "q"
    val_qs_dual: float | None = None
    steps: int = 0
    level_epochs: dict = field(default_factory=dict)  # fcnn: tau -> selected epoch
    wall_clock_s: float = 0.0

    def deterministic_dict(self):
        d = asdict(self)
        d.pop("wall_clock_s")
        return d

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def epochs_csv(self):
        buf = io.StringIO()
        if not self.epochs:
            return ""
        lead = ["tau", "epoch", "step"] if "tau" in self.epochs[0] else ["epoch", "step"]
        keys = lead + [f"loss_{k}" for k in self.epochs[0]["loss"]] + \
            [f"val_{k}" for k in self.epochs[0]["val"]]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for e in self.epochs:
            w.writerow([e[k] for k in lead] + list(e["loss"].values()) + list(e["val"].values()))
        return buf.getvalue()


# ---------------------------------------------------------------------------

def _split_train_val(ds, cfg):
    if np.any(ds.split == VAL):
        train, val = ds.part(TRAIN), ds.part(VAL)
    else:
        idx = np.flatnonzero(ds.split == TRAIN)
        if idx.size < 4:
            raise DataError(f"only {idx.size} training rows; cannot carve out a validation split")
        sub = split_indices(idx.size, cfg.val_fraction, 0.0, np.random.default_rng(cfg.seed))
        train = ds.x[idx[sub == TRAIN]], ds.y[idx[sub == TRAIN]]
        val = ds.x[idx[sub == VAL]], ds.y[idx[sub == VAL]]
    if train[1].size < 2 or val[1].size < 1:
        raise DataError("insufficient data for a train/validation split")
    return train, val


def _arch(cfg, d, output_dim=1):
    return ArchSpec(d, list(cfg.feature_widths), list(cfg.regression_widths), output_dim, cfg.injection)


def _check_finite(lb, step):
    if not math.isfinite(lb.total):
        raise TrainingDiverged(f"non-finite loss at step {step}: {lb.as_dict()}")


def _val_metrics(model, xv, yv, cfg, with_f):
    qs, _ = metrics.qs_score(model, xv, yv)
    out = {
        "q_s": qs,
        "mae": metrics.mae(model.q_forward(0.5, xv), yv),
        "mse": metrics.mse(inference.predict_mean(model, xv), yv),
        "crossing_rate": metrics.crossing_rate(model, xv[: cfg.val_crossing_rows]),
    }
    if with_f:
        out["recover_Q"], out["recover_F"] = metrics.recover_errors(model, xv, yv)
    else:
        out["recover_Q"] = out["recover_F"] = None
    return out


def train(dataset, cfg):
    """Train per ``cfg.mode`` on a standardized dataset; returns (model, TrainReport)."""
    if dataset.stats is None:
        raise DataError("dataset must be standardized before training")
    if cfg.mode in ("fcnn", "fcnn-joint"):
        return _train_fixed(dataset, cfg)
    return _train_ddr(dataset, cfg)


def _train_ddr(ds, cfg):
    t0 = time.perf_counter()
    (xt, yt), (xv, yv) = _split_train_val(ds, cfg)
    with_f = cfg.mode != "ddr-q"
    stats = ds.stats
    scfg = SamplerConfig(
        seed=cfg.seed, batch_size=cfg.batch_size, tau_prior=cfg.tau_prior,
        beta_a=cfg.beta_a, beta_b=cfg.beta_b,
        ytilde_min=stats.ytilde_min, ytilde_max=stats.ytilde_max,
        ytilde_anchors=empirical_deciles(yt),
    )
    sampler = Sampler(scfg)
    arch = _arch(cfg, xt.shape[1])
    model = DdrModel.initialize(arch, sampler.rng("init"), stats)
    graph = LossGraph(arch, cfg.mode, cfg.eps_tau, cfg.eps_y, recover_grad=cfg.recover_grad)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    schedule = AnnealSchedule(default_ramps(cfg.loss_weights))
    active = set(ACTIVE[cfg.mode])
    feature_names = [n for n in model.params if not is_regression_param(n)]
    all_names = list(model.params)

    steps_per_epoch = math.ceil(yt.size / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    report = TrainReport(cfg.mode, cfg.to_dict())
    report.initial_val = _val_metrics(model, xv, yv, cfg, with_f)
    best = model.copy()
    since_best = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        parts = []
        for idx in sampler.batch_indices(yt.size):
            if step >= total:
                break
            w = anneal_weights(schedule, step, total)
            w = {c: (v if c in active else 0.0) for c, v in w.items()}
            samples = sampler.loss_samples(idx.size, with_f)
            lb, grads = graph.evaluate(model.params, xt[idx], yt[idx], samples, w)
            _check_finite(lb, step)
            names = all_names if step % cfg.update_ratio == 0 else feature_names
            opt.step(model.params, grads, names)
            parts.append(lb)
            step += 1
        if not parts:
            break
        val = _val_metrics(model, xv, yv, cfg, with_f)
        report.epochs.append({"epoch": epoch, "step": step,
                              "loss": LossBreakdown.mean_of(parts).as_dict(), "val": val})
        log.info("epoch %d step %d loss %.5f val q_s %.5f", epoch, step, report.epochs[-1]["loss"]["total"], val["q_s"])
        if val["q_s"] < report.best_val_qs:
            report.best_val_qs = val["q_s"]
            report.selected_epoch = epoch
            best = model.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
        if step >= total:
            break
    report.steps = step
    if report.selected_epoch == 0:
        report.best_val_qs = report.initial_val["q_s"]
    if with_f and cfg.select_inference:
        dual_qs, _ = metrics.qs_score(best, xv, yv, mode="dual", alpha=cfg.alpha)
        report.val_qs_dual = dual_qs
        if dual_qs < report.best_val_qs:
            report.inference_mode = "dual"
    best.trained_mode = cfg.mode
    report.wall_clock_s = time.perf_counter() - t0
    return best, report


def _fit_fixed(arch, taus, xt, yt, xv, yv, cfg, sampler, init_rng, stats):
    net = FixedQuantileNet.initialize(arch, init_rng, taus, stats)
    graph = QuantileSetGraph(arch, taus)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    feature_names = [n for n in net.params if not is_regression_param(n)]
    all_names = list(net.params)
    total = cfg.epochs * math.ceil(yt.size / cfg.batch_size)
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    def val_score(m):
        return metrics.qs_from_predictions(yv, m.predict_all(xv), taus)[0]

    history = []
    best, best_score, best_epoch, since = net.copy(), val_score(net), 0, 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in sampler.batch_indices(yt.size):
            if step >= total:
                break
            loss, grads = graph.evaluate(net.params, xt[idx], yt[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            opt.step(net.params, grads, all_names if step % cfg.update_ratio == 0 else feature_names)
            losses.append(loss)
            step += 1
        if not losses:
            break
        score = val_score(net)
        history.append({"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "val": score})
        if score < best_score:
            best, best_score, best_epoch, since = net.copy(), score, epoch, 0
        else:
            since += 1
            if since >= cfg.patience:
                break
        if step >= total:
            break
    return best, best_epoch, history, step


def _fixed_row(h):
    return {"epoch": h["epoch"], "step": h["step"], "loss": {"total": h["loss"]}, "val": {"q_s": h["val"]}}


def _train_fixed(ds, cfg):
    t0 = time.perf_counter()
    (xt, yt), (xv, yv) = _split_train_val(ds, cfg)
    sampler = Sampler(SamplerConfig(seed=cfg.seed, batch_size=cfg.batch_size))
    init_rng = sampler.rng("init")
    report = TrainReport(cfg.mode, cfg.to_dict())
    if cfg.mode == "fcnn-joint":
        arch = _arch(cfg, xt.shape[1], len(DECILES))
        net, best_epoch, hist, steps = _fit_fixed(arch, DECILES, xt, yt, xv, yv, cfg, sampler, init_rng, ds.stats)
        model = net
        report.selected_epoch = best_epoch
        report.epochs = [_fixed_row(h) for h in hist]
        report.steps = steps
    else:
        arch = _arch(cfg, xt.shape[1], 1)
        nets = []
        for tau in DECILES:
            net, best_epoch, hist, steps = _fit_fixed(arch, (tau,), xt, yt, xv, yv, cfg, sampler, init_rng, ds.stats)
            nets.append(net)
            report.level_epochs[repr(tau)] = best_epoch
            report.epochs += [{"tau": tau, **_fixed_row(h)} for h in hist]
            report.steps += steps
        model = QuantileNetSet(nets)
    report.best_val_qs = metrics.qs_score(model, xv, yv)[0]
    report.wall_clock_s = time.perf_counter() - t0
    return model, report
