"""Loss terms for joint quantile / CDF training.

Two layers live here.  The plain numpy functions (``pinball``,
``cdf_nll``, ``grad_penalty_q`` ...) evaluate one term on any object
exposing ``q_forward(tau, x)`` and ``f_forward(ytilde, x) -> (eta, F)``;
they are used for reporting and as the reference the training graph is
tested against.  :class:`LossGraph` builds every term of one training step
as a single differentiable tape.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import Tape
from .network import CDF, MEDIAN, QUANTILE, backbone_stage, declare_params

COMPONENTS = (
    "pinball_mc", "pinball_anchor", "cdf_nll_mc", "cdf_nll_anchor",
    "grad_Q", "grad_F", "recover_Q", "recover_F", "dual_Q", "dual_F", "median",
)
MODES = ("ddr-q", "ddr-disjoint", "ddr-joint")
ACTIVE = {
    "ddr-q": ("pinball_mc", "pinball_anchor", "grad_Q", "median"),
    "ddr-disjoint": ("pinball_mc", "pinball_anchor", "cdf_nll_mc", "cdf_nll_anchor",
                     "grad_Q", "grad_F", "median"),
    "ddr-joint": COMPONENTS,
}
EPS_TAU = 1e-2
EPS_Y = 1e-2
# Which parameters a recover term |a - outer(inner(a))| trains: "full" lets
# the gradient reach both models, "inner" stops it at the outer model's
# parameters so only the inner model is pulled toward the inverse.
RECOVER_GRADS = ("full", "inner")


@dataclass
class LossBreakdown:
    pinball_mc: float = 0.0
    pinball_anchor: float = 0.0
    cdf_nll_mc: float = 0.0
    cdf_nll_anchor: float = 0.0
    grad_Q: float = 0.0
    grad_F: float = 0.0
    recover_Q: float = 0.0
    recover_F: float = 0.0
    dual_Q: float = 0.0
    dual_F: float = 0.0
    median: float = 0.0
    total: float = 0.0

    @classmethod
    def from_vector(cls, comps, weights):
        comps = [float(c) for c in np.asarray(comps).reshape(-1)]
        total = float(np.dot(comps, weights_vector(weights)))
        return cls(*comps, total=total)

    def vector(self):
        return np.array([getattr(self, c) for c in COMPONENTS])

    def as_dict(self):
        return asdict(self)

    @classmethod
    def mean_of(cls, items):
        if not items:
            return cls()
        return cls(**{f.name: float(np.mean([getattr(b, f.name) for b in items])) for f in fields(cls)})


def weights_vector(weights):
    """Dense weight row in COMPONENTS order; missing names weigh zero."""
    if weights is None:
        return np.ones(len(COMPONENTS))
    if isinstance(weights, dict):
        unknown = set(weights) - set(COMPONENTS)
        if unknown:
            raise KeyError(f"unknown loss components: {sorted(unknown)}")
        return np.array([float(weights.get(c, 0.0)) for c in COMPONENTS])
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != len(COMPONENTS):
        raise ValueError(f"need {len(COMPONENTS)} weights, got {w.size}")
    return w


# ---------------------------------------------------------------------------
# Elementwise losses.

def pinball(tau, y, yhat):
    """tau * max(y - yhat, 0) + (1 - tau) * max(yhat - y, 0), elementwise."""
    tau = np.asarray(tau, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64)
    out = tau * np.maximum(r, 0.0) + (1.0 - tau) * np.maximum(-r, 0.0)
    return out if out.ndim else float(out)


def cdf_nll(indicator, eta):
    """Negative Bernoulli log-likelihood in log-odds form, overflow-safe."""
    ind = np.asarray(indicator, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    out = np.maximum(eta, 0.0) - ind * eta + np.log1p(np.exp(-np.abs(eta)))
    return out if out.ndim else float(out)


def _check_eps(eps):
    if not eps > 0:
        raise ValueError(f"finite-difference step must be > 0, got {eps}")


def probe_center(tau, eps=EPS_TAU):
    """Keep tau +/- eps inside the open unit interval."""
    return np.clip(np.asarray(tau, dtype=np.float64), 2.0 * eps, 1.0 - 2.0 * eps)


# ---------------------------------------------------------------------------
# Model-level terms (numpy, no gradients).

def pinball_mc(model, x, y, tau):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("empty batch")
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1), y.shape)
    return float(np.mean(pinball(tau, y, model.q_forward(tau, x))))


def grad_penalty_q(model, tau, x, eps=EPS_TAU):
    """Sum of max(-dQ/dtau, 0) with dQ/dtau taken as a central difference."""
    _check_eps(eps)
    tau = np.asarray(tau, dtype=np.float64)
    slope = (model.q_forward(tau + eps, x) - model.q_forward(tau - eps, x)) / (2.0 * eps)
    return float(np.sum(np.maximum(-slope, 0.0)))


def grad_penalty_f(model, ytilde, x, eps=EPS_Y):
    _check_eps(eps)
    ytilde = np.asarray(ytilde, dtype=np.float64)
    slope = (model.f_forward(ytilde + eps, x)[1] - model.f_forward(ytilde - eps, x)[1]) / (2.0 * eps)
    return float(np.sum(np.maximum(-slope, 0.0)))


def recover_losses(model, tau, ytilde, x):
    """(mean |tau - F(Q(tau))|, mean |ytilde - Q(F(ytilde))|)."""
    tau = np.asarray(tau, dtype=np.float64)
    ytilde = np.asarray(ytilde, dtype=np.float64)
    q = model.q_forward(tau, x)
    lq = np.mean(np.abs(tau - model.f_forward(q, x)[1]))
    p = model.f_forward(ytilde, x)[1]
    lf = np.mean(np.abs(ytilde - model.q_forward(p, x)))
    return float(lq), float(lf)


def dual_losses(model, tau, ytilde, x, eps_tau=EPS_TAU, eps_y=EPS_Y):
    """Monotonicity penalties through Q(F(Q(tau))) and F(Q(F(ytilde)))."""
    _check_eps(eps_tau)
    _check_eps(eps_y)
    tau = np.asarray(tau, dtype=np.float64)
    ytilde = np.asarray(ytilde, dtype=np.float64)

    def qfq(t):
        return model.q_forward(model.f_forward(model.q_forward(t, x), x)[1], x)

    def fqf(v):
        return model.f_forward(model.q_forward(model.f_forward(v, x)[1], x), x)[1]

    dq = (qfq(tau + eps_tau) - qfq(tau - eps_tau)) / (2.0 * eps_tau)
    df = (fqf(ytilde + eps_y) - fqf(ytilde - eps_y)) / (2.0 * eps_y)
    return float(np.sum(np.maximum(-dq, 0.0))), float(np.sum(np.maximum(-df, 0.0)))


# ---------------------------------------------------------------------------
# Differentiable training objective.

@dataclass
class LossSamples:
    """Per-example draws for one step; all arrays have one entry per row."""

    tau: np.ndarray
    tau_anchor: np.ndarray
    ytilde: np.ndarray
    ytilde_anchor: np.ndarray


def _col(a):
    return np.asarray(a, dtype=np.float64).reshape(-1, 1)


class LossGraph:
    """Every loss component of one training step on a single tape.

    The tape output is the 1 x 11 row of components in COMPONENTS order, so
    ``backward(seed=weights)`` yields the gradient of the weighted total.
    """

    def __init__(self, arch, mode="ddr-joint", eps_tau=EPS_TAU, eps_y=EPS_Y, heads=(QUANTILE, CDF),
                 recover_grad="full"):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if recover_grad not in RECOVER_GRADS:
            raise ValueError(f"unknown recover_grad {recover_grad!r}; expected one of {RECOVER_GRADS}")
        _check_eps(eps_tau)
        _check_eps(eps_y)
        self.recover_grad = recover_grad
        self.arch, self.mode = arch, mode
        self.eps_tau, self.eps_y = eps_tau, eps_y
        self.shapes = arch.param_shapes(heads)
        self.tape = self._build()

    def _build(self):
        tape, arch = Tape(), self.arch
        P = declare_params(tape, self.shapes)
        x = tape.input("x", cols=arch.input_dim)
        y = tape.input("y", cols=1)
        tau = tape.input("tau", cols=1)
        omt = tape.input("one_minus_tau", cols=1)
        tau_a = tape.input("tau_anchor", cols=1)
        omt_a = tape.input("one_minus_tau_anchor", cols=1)
        tau_p = tape.input("tau_probe", cols=1)
        et, ey = self.eps_tau, self.eps_y
        comps = {}

        def pin(t, o, q):
            return tape.mean(t * tape.relu(y - q) + o * tape.relu(q - y))

        def neg_slope_sum(hi, lo, eps):
            return tape.sum(tape.neg_relu((hi - lo) * (0.5 / eps)))

        blocks = [(MEDIAN, None), (QUANTILE, tau), (QUANTILE, tau_a),
                  (QUANTILE, tau_p + et), (QUANTILE, tau_p - et)]
        with_f = self.mode != "ddr-q"
        if with_f:
            yt = tape.input("ytilde", cols=1)
            ind = tape.input("indicator", cols=1)
            yt_a = tape.input("ytilde_anchor", cols=1)
            ind_a = tape.input("indicator_anchor", cols=1)
            blocks += [(CDF, yt), (CDF, yt_a), (CDF, yt + ey), (CDF, yt - ey)]
        n1 = len(blocks)
        out1 = backbone_stage(tape, arch, P, x, blocks)
        b = [tape.row_block(out1, k, n1) for k in range(n1)]
        comps["median"] = tape.mean(tape.abs(y - b[0])) * 0.5
        comps["pinball_mc"] = pin(tau, omt, b[1])
        comps["pinball_anchor"] = pin(tau_a, omt_a, b[2])
        comps["grad_Q"] = neg_slope_sum(b[3], b[4], et)
        if with_f:
            comps["cdf_nll_mc"] = tape.mean(tape.softplus(b[5]) - ind * b[5])
            comps["cdf_nll_anchor"] = tape.mean(tape.softplus(b[6]) - ind_a * b[6])
            comps["grad_F"] = neg_slope_sum(tape.sigmoid(b[7]), tape.sigmoid(b[8]), ey)
        if self.mode == "ddr-joint":
            p_mc, p_hi, p_lo = tape.sigmoid(b[5]), tape.sigmoid(b[7]), tape.sigmoid(b[8])
            if self.recover_grad == "full":
                stage2 = [(CDF, b[1]), (CDF, b[3]), (CDF, b[4]),
                          (QUANTILE, p_mc), (QUANTILE, p_hi), (QUANTILE, p_lo)]
                out2 = backbone_stage(tape, arch, P, x, stage2)
                c = [tape.row_block(out2, k, 6) for k in range(6)]
            else:
                frozen = {n: tape.stop_gradient(v) for n, v in P.items()}
                out_r = backbone_stage(tape, arch, frozen, x, [(CDF, b[1]), (QUANTILE, p_mc)])
                out2 = backbone_stage(tape, arch, P, x, [(CDF, b[3]), (CDF, b[4]),
                                                         (QUANTILE, p_hi), (QUANTILE, p_lo)])
                c = [tape.row_block(out_r, 0, 2)] + [tape.row_block(out2, k, 4) for k in (0, 1)] + \
                    [tape.row_block(out_r, 1, 2)] + [tape.row_block(out2, k, 4) for k in (2, 3)]
            comps["recover_Q"] = tape.mean(tape.abs(tau - tape.sigmoid(c[0])))
            comps["recover_F"] = tape.mean(tape.abs(yt - c[3]))
            stage3 = [(QUANTILE, tape.sigmoid(c[1])), (QUANTILE, tape.sigmoid(c[2])),
                      (CDF, c[4]), (CDF, c[5])]
            out3 = backbone_stage(tape, arch, P, x, stage3)
            d = [tape.row_block(out3, k, 4) for k in range(4)]
            comps["dual_Q"] = neg_slope_sum(d[0], d[1], et)
            comps["dual_F"] = neg_slope_sum(tape.sigmoid(d[2]), tape.sigmoid(d[3]), ey)
        zero = tape.zeros(comps["median"], 1)
        tape.set_output(tape.concat([comps.get(c, zero) for c in COMPONENTS], axis=1))
        return tape

    def feed(self, params, x, y, samples):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = _col(y)
        if y.shape[0] == 0:
            raise ValueError("empty batch")
        tau, tau_a = _col(samples.tau), _col(samples.tau_anchor)
        feed = dict(params)
        feed.update(
            x=x, y=y, tau=tau, one_minus_tau=1.0 - tau,
            tau_anchor=tau_a, one_minus_tau_anchor=1.0 - tau_a,
            tau_probe=probe_center(tau, self.eps_tau),
        )
        if self.mode != "ddr-q":
            yt, yt_a = _col(samples.ytilde), _col(samples.ytilde_anchor)
            feed.update(
                ytilde=yt, indicator=(y <= yt).astype(np.float64),
                ytilde_anchor=yt_a, indicator_anchor=(y <= yt_a).astype(np.float64),
            )
        return feed

    def components(self, params, x, y, samples):
        return self.tape.forward(self.feed(params, x, y, samples))[0].copy()

    def evaluate(self, params, x, y, samples, weights=None, with_grad=True):
        """Returns (LossBreakdown, gradient dict or None)."""
        w = weights_vector(weights)
        comps = self.components(params, x, y, samples)
        grads = self.tape.backward(w.reshape(1, -1)) if with_grad else None
        return LossBreakdown.from_vector(comps, w), grads


def total_loss(model, x, y, samples, weights=None, mode="ddr-joint", eps_tau=EPS_TAU,
               eps_y=EPS_Y, with_grad=False, recover_grad="full"):
    """All loss components of ``model`` on one batch; see :class:`LossGraph`."""
    graph = LossGraph(model.arch, mode, eps_tau, eps_y, recover_grad=recover_grad)
    return graph.evaluate(model.params, x, y, samples, weights, with_grad)


class QuantileSetGraph:
    """Summed fixed-level pinball loss for the plain multi-output baselines."""

    def __init__(self, arch, taus):
        if arch.output_dim != len(taus):
            raise ValueError("one output per quantile level required")
        self.arch = arch
        self.taus = np.asarray(taus, dtype=np.float64).reshape(1, -1)
        self.shapes = arch.param_shapes(())
        tape = Tape()
        P = declare_params(tape, self.shapes)
        x = tape.input("x", cols=arch.input_dim)
        y = tape.input("y", cols=arch.output_dim)
        t = tape.input("tau", cols=arch.output_dim)
        o = tape.input("one_minus_tau", cols=arch.output_dim)
        q = backbone_stage(tape, arch, P, x, [(MEDIAN, None)])
        # mean over rows of the per-row sum over levels
        per = t * tape.relu(y - q) + o * tape.relu(q - y)
        tape.set_output(tape.mean(per) * float(arch.output_dim))
        self.tape = tape

    def evaluate(self, params, x, y, with_grad=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n, k = x.shape[0], self.taus.shape[1]
        feed = dict(params)
        feed.update(
            x=x, y=np.repeat(_col(y), k, axis=1),
            tau=np.repeat(self.taus, n, axis=0), one_minus_tau=np.repeat(1.0 - self.taus, n, axis=0),
        )
        loss = float(self.tape.forward(feed)[0, 0])
        return loss, (self.tape.backward(1.0) if with_grad else None)
