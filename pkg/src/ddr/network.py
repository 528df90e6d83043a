"""Shared median backbone with a quantile head and a log-odds CDF head.

The backbone is a stack of GLU layers (the feature part) followed by ReLU
layers and a linear output (the regression part).  The quantile head adds
``W_tau * (2 tau - 1) + b_tau`` to the pre-activation of every feature
layer; the CDF head adds ``W_y * ytilde + b_y`` the same way and reads the
backbone output as log-odds.  With no injection the backbone is the median
regressor.

Weights are stored as ``(fan_in, fan_out)`` so a batch is ``x @ W + b``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import GraphError, Tape, as_tensor2, sigmoid
from .data import Standardization

FORMAT_VERSION = 1
TAU_EPS = 1e-4
EVAL_CHUNK = 4096
# largest double below 1 and smallest positive normal: keep F strictly in (0, 1)
_P_HI = float(np.nextafter(1.0, 0.0))
_P_LO = float(np.finfo(np.float64).tiny)

MEDIAN, QUANTILE, CDF = "median", "q", "f"


class ModelFormatError(ValueError):
    """Unreadable, truncated or inconsistent model file."""


class IncompatibleModelError(ModelFormatError):
    """Model file built for a different architecture."""


@dataclass
class ArchSpec:
    input_dim: int
    feature_widths: list = field(default_factory=lambda: [256, 256])
    regression_widths: list = field(default_factory=lambda: [256])
    output_dim: int = 1
    injection: str = "linear"
    injection_hidden: int = 16

    def __post_init__(self):
        self.feature_widths = [int(w) for w in self.feature_widths]
        self.regression_widths = [int(w) for w in self.regression_widths]
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.feature_widths or not self.regression_widths:
            raise ValueError("need at least one feature layer and one regression layer")
        if min(self.feature_widths + self.regression_widths) < 1:
            raise ValueError("hidden widths must be positive")
        if self.injection not in ("linear", "mlp"):
            raise ValueError(f"unknown injection mode {self.injection!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def param_shapes(self, heads=(QUANTILE, CDF)):
        shapes = {}
        fan_in = self.input_dim
        for i, w in enumerate(self.feature_widths):
            shapes[f"feat{i}.W"] = (fan_in, 2 * w)
            shapes[f"feat{i}.b"] = (1, 2 * w)
            fan_in = w
        for i, w in enumerate(self.regression_widths):
            shapes[f"reg{i}.W"] = (fan_in, w)
            shapes[f"reg{i}.b"] = (1, w)
            fan_in = w
        shapes["out.W"] = (fan_in, self.output_dim)
        shapes["out.b"] = (1, self.output_dim)
        p = self.injection_hidden
        for head in heads:
            for i, w in enumerate(self.feature_widths):
                pre = f"{head}_inj{i}"
                if self.injection == "linear":
                    shapes[f"{pre}.W"] = (1, 2 * w)
                    shapes[f"{pre}.b"] = (1, 2 * w)
                else:
                    shapes[f"{pre}.W1"] = (1, 2 * p)
                    shapes[f"{pre}.b1"] = (1, 2 * p)
                    shapes[f"{pre}.W2"] = (p, 2 * w)
                    shapes[f"{pre}.b2"] = (1, 2 * w)
        return shapes


def is_regression_param(name):
    return name.startswith(("reg", "out."))


def init_params(arch, rng, heads=(QUANTILE, CDF)):
    """Glorot-uniform weights, zero biases."""
    params = {}
    for name, (r, c) in arch.param_shapes(heads).items():
        if name.rsplit(".", 1)[1].startswith("b"):
            params[name] = np.zeros((r, c))
        else:
            lim = np.sqrt(6.0 / (r + c))
            params[name] = rng.uniform(-lim, lim, size=(r, c))
    return params


def declare_params(tape, shapes, requires_grad=True):
    return {n: tape.input(n, cols=c, rows=r, requires_grad=requires_grad)
            for n, (r, c) in shapes.items()}


def _injection(tape, arch, P, head, layer, t):
    pre = f"{head}_inj{layer}"
    if arch.injection == "linear":
        return t @ P[f"{pre}.W"] + P[f"{pre}.b"]
    h = tape.glu(t @ P[f"{pre}.W1"] + P[f"{pre}.b1"])
    return h @ P[f"{pre}.W2"] + P[f"{pre}.b2"]


def backbone_stage(tape, arch, P, x, blocks):
    """One stacked backbone pass over several evaluation blocks.

    ``blocks`` is a list of ``(head, t)`` pairs, each covering the rows of
    ``x``: ``head`` is MEDIAN (``t`` ignored), QUANTILE (``t`` is tau) or
    CDF (``t`` is ytilde in standardized units).  Returns the stacked
    output, block ``k`` occupying rows ``k*n .. (k+1)*n``.
    """
    k = len(blocks)
    inj_t = []
    for head, t in blocks:
        if head == QUANTILE:
            inj_t.append(t * 2.0 - 1.0)
        else:
            inj_t.append(t)
    h = None
    for layer, w in enumerate(arch.feature_widths):
        if layer == 0:
            lin = x @ P["feat0.W"] + P["feat0.b"]
            if k > 1:
                lin = tape.tile_rows(lin, k)
        else:
            lin = h @ P[f"feat{layer}.W"] + P[f"feat{layer}.b"]
        if all(head == MEDIAN for head, _ in blocks):
            z = lin
        else:
            parts = []
            for (head, _), t in zip(blocks, inj_t):
                if head == MEDIAN:
                    parts.append(tape.zeros(x, 2 * w))
                else:
                    parts.append(_injection(tape, arch, P, head, layer, t))
            z = lin + (parts[0] if k == 1 else tape.concat(parts, axis=0))
        h = tape.glu(z)
    for layer in range(len(arch.regression_widths)):
        h = tape.relu(h @ P[f"reg{layer}.W"] + P[f"reg{layer}.b"])
    return h @ P["out.W"] + P["out.b"]


def _eval_graph(arch, heads_params, head):
    tape = Tape()
    P = declare_params(tape, heads_params, requires_grad=False)
    x = tape.input("x", cols=arch.input_dim)
    t = tape.input("t", cols=1) if head != MEDIAN else None
    tape.set_output(backbone_stage(tape, arch, P, x, [(head, t)]))
    return tape


def _as_rows(x, d):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if d == 1 else x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != d:
        raise GraphError(f"expected feature rows with {d} columns, got shape {x.shape}")
    return x


def _broadcast_t(t, n):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 1:
        t = np.full(n, t[0])
    if t.size != n:
        raise GraphError(f"got {t.size} injection values for {n} rows")
    return t.reshape(-1, 1)


def _chunked(tape, params, x, t=None, rows=EVAL_CHUNK):
    """Forward pass in bounded-memory row chunks."""
    outs = []
    feed = dict(params)
    for s in range(0, max(x.shape[0], 1), rows):
        feed["x"] = x[s:s + rows]
        if t is not None:
            feed["t"] = t[s:s + rows]
        outs.append(tape.forward(feed))
    return np.concatenate(outs, axis=0)


class _Serializable:
    kind = ""

    def _extra(self):
        return {}

    def save(self, path):
        blocks = []
        for name, arr in self.params.items():
            vals = ",".join(format(float(v), ".17g") for v in arr.ravel())
            blocks.append(
                f'{{"name": {json.dumps(name)}, "rows": {arr.shape[0]}, '
                f'"cols": {arr.shape[1]}, "values": [{vals}]}}'
            )
        head = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "arch": self.arch.to_dict(),
            "stats": self.stats.to_dict(),
            **self._extra(),
        }
        text = json.dumps(head, indent=1)[:-2] + ',\n "params": [\n  ' + ",\n  ".join(blocks) + "\n ]\n}\n"
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
        return path


def _read_model_file(path, kind, arch=None):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: cannot read model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported format_version {doc.get('format_version') if isinstance(doc, dict) else None!r}"
            f" (expected {FORMAT_VERSION})")
    if doc.get("kind") != kind:
        raise ModelFormatError(f"{path}: holds a {doc.get('kind')!r} model, expected {kind!r}")
    try:
        file_arch = ArchSpec.from_dict(doc["arch"])
        stats = Standardization.from_dict(doc["stats"])
        blocks = doc["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed header ({exc})") from exc
    if arch is not None and file_arch != arch:
        raise IncompatibleModelError(f"{path}: architecture {file_arch} does not match expected {arch}")
    params = {}
    for b in blocks:
        try:
            arr = np.array(b["values"], dtype=np.float64)
            rows, cols = int(b["rows"]), int(b["cols"])
            if arr.size != rows * cols:
                raise ValueError(f"{b['name']}: {arr.size} values for {rows}x{cols}")
            params[b["name"]] = arr.reshape(rows, cols)
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{path}: corrupt parameter block ({exc})") from exc
    return doc, file_arch, stats, params


def _check_params(params, shapes, where="model"):
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ModelFormatError(f"{where}: parameter names differ (missing {missing}, unexpected {extra})")
    for n, shp in shapes.items():
        if params[n].shape != tuple(shp):
            raise ModelFormatError(f"{where}: {n} has shape {params[n].shape}, expected {tuple(shp)}")
        if not np.all(np.isfinite(params[n])):
            raise ModelFormatError(f"{where}: {n} has non-finite entries")


class DdrModel(_Serializable):
    """Median backbone plus quantile and CDF heads, all in standardized units."""

    kind = "ddr"
    heads = (QUANTILE, CDF)

    def __init__(self, arch, params, stats, trained_mode=None):
        _check_params(params, arch.param_shapes(self.heads))
        if stats.dim != arch.input_dim:
            raise ModelFormatError(f"stats cover {stats.dim} features, arch expects {arch.input_dim}")
        self.arch = arch
        self.params = params
        self.stats = stats
        # ddr-q leaves the CDF head untrained; inference guards read this
        self.trained_mode = trained_mode

    @classmethod
    def initialize(cls, arch, rng, stats=None):
        stats = stats if stats is not None else Standardization.identity(arch.input_dim)
        return cls(arch, init_params(arch, rng, cls.heads), stats)

    def copy(self):
        return type(self)(self.arch, {k: v.copy() for k, v in self.params.items()}, self.stats,
                          self.trained_mode)

    def _run(self, head, x, t=None):
        x = _as_rows(x, self.arch.input_dim)
        tape = _eval_graph(self.arch, self.arch.param_shapes(self.heads), head)
        t = _broadcast_t(t, x.shape[0]) if head != MEDIAN else None
        return _chunked(tape, self.params, x, t)[:, 0]

    def median_forward(self, x):
        return self._run(MEDIAN, x)

    def q_forward(self, tau, x):
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(~np.isfinite(tau)) or np.any((tau <= 0) | (tau >= 1)):
            raise GraphError("tau must lie strictly inside (0, 1)")
        return self._run(QUANTILE, x, np.clip(tau, TAU_EPS, 1.0 - TAU_EPS))

    def f_forward(self, ytilde, x):
        """Returns (log-odds, probability); the probability is strictly inside (0, 1)."""
        ytilde = np.asarray(ytilde, dtype=np.float64)
        if np.any(~np.isfinite(ytilde)):
            raise GraphError("ytilde must be finite")
        eta = self._run(CDF, x, ytilde)
        return eta, np.clip(sigmoid(eta), _P_LO, _P_HI)

    def _extra(self):
        return {"trained_mode": self.trained_mode}

    @classmethod
    def load(cls, path, arch=None):
        doc, file_arch, stats, params = _read_model_file(path, cls.kind, arch)
        _check_params(params, file_arch.param_shapes(cls.heads), str(path))
        return cls(file_arch, params, stats, doc.get("trained_mode"))


class FixedQuantileNet(_Serializable):
    """Plain backbone predicting a fixed list of quantile levels, one output each."""

    kind = "fcnn"
    heads = ()

    def __init__(self, arch, params, stats, taus):
        self.taus = [float(t) for t in taus]
        if arch.output_dim != len(self.taus):
            raise ModelFormatError(f"{len(self.taus)} levels but output_dim={arch.output_dim}")
        _check_params(params, arch.param_shapes(self.heads))
        self.arch = arch
        self.params = params
        self.stats = stats

    @classmethod
    def initialize(cls, arch, rng, taus, stats=None):
        stats = stats if stats is not None else Standardization.identity(arch.input_dim)
        return cls(arch, init_params(arch, rng, cls.heads), stats, taus)

    def copy(self):
        return type(self)(self.arch, {k: v.copy() for k, v in self.params.items()}, self.stats, self.taus)

    def predict_all(self, x):
        x = _as_rows(x, self.arch.input_dim)
        tape = _eval_graph(self.arch, self.arch.param_shapes(self.heads), MEDIAN)
        return _chunked(tape, self.params, x)

    def level_index(self, tau):
        tau = float(np.asarray(tau).reshape(-1)[0]) if np.ndim(tau) else float(tau)
        for i, t in enumerate(self.taus):
            if abs(t - tau) < 1e-9:
                return i
        raise GraphError(f"this net only predicts levels {self.taus}, not {tau}")

    def q_forward(self, tau, x):
        if np.ndim(tau) and np.unique(np.asarray(tau)).size > 1:
            raise GraphError("fixed-level nets need a single tau per call")
        return self.predict_all(x)[:, self.level_index(tau)]

    def median_forward(self, x):
        return self.q_forward(0.5, x)

    def _extra(self):
        return {"taus": self.taus}

    @classmethod
    def load(cls, path, arch=None):
        doc, file_arch, stats, params = _read_model_file(path, cls.kind, arch)
        _check_params(params, file_arch.param_shapes(cls.heads), str(path))
        return cls(file_arch, params, stats, doc.get("taus", []))


class QuantileNetSet:
    """Several single-level nets acting as one predictor (the ``fcnn`` baseline)."""

    def __init__(self, nets):
        self.nets = list(nets)
        self.taus = [n.taus[0] for n in self.nets]
        self.stats = self.nets[0].stats
        self.arch = self.nets[0].arch

    def q_forward(self, tau, x):
        if np.ndim(tau) and np.unique(np.asarray(tau)).size > 1:
            raise GraphError("fixed-level nets need a single tau per call")
        t = float(np.asarray(tau).reshape(-1)[0])
        for net in self.nets:
            if abs(net.taus[0] - t) < 1e-9:
                return net.q_forward(t, x)
        raise GraphError(f"no net for level {t}; available {self.taus}")

    def median_forward(self, x):
        return self.q_forward(0.5, x)


def load_model(path):
    """Load any model file, dispatching on its ``kind``."""
    try:
        with open(path, encoding="utf-8") as fh:
            kind = json.load(fh).get("kind")
    except (OSError, UnicodeDecodeError, json.JSONDecodeError, AttributeError) as exc:
        raise ModelFormatError(f"{path}: cannot read model file ({exc})") from exc
    if kind == DdrModel.kind:
        return DdrModel.load(path)
    if kind == FixedQuantileNet.kind:
        return FixedQuantileNet.load(path)
    raise ModelFormatError(f"{path}: unknown model kind {kind!r}")


def check_input_dim(model, x):
    as_tensor2(x, "x")
    if np.asarray(x).shape[1] != model.arch.input_dim:
        raise GraphError(f"model expects {model.arch.input_dim} features, got {np.asarray(x).shape[1]}")
