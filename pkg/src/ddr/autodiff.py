"""Reverse-mode differentiation over static feed-forward graphs.

A :class:`Tape` is built once by declaring named inputs and chaining
primitive ops on the returned :class:`Var` handles.  ``forward`` evaluates
every node for a concrete set of input arrays and caches the values;
``backward`` then walks the nodes in exact reverse order and returns the
adjoint of every ``requires_grad`` input.

Values are always 2-D float64 arrays (rows x cols).  Row counts are free
at build time and fixed by the arrays handed to ``forward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class GraphError(ValueError):
    """Shape mismatch, bad input, or misuse of a tape."""


def as_tensor2(value, name="tensor"):
    """Coerce ``value`` to a finite 2-D float64 array."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise GraphError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GraphError(f"{name}: non-finite entries are not allowed")
    return arr


def sigmoid(x):
    """Overflow-free logistic function."""
    return expit(np.asarray(x, dtype=np.float64))


def softplus(x):
    """ln(1 + e^x) computed without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def glu(a):
    """Gated linear unit: first half of the columns gated by the sigmoid of the second half."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.shape[1] % 2:
        raise GraphError(f"glu: input width {a.shape[1]} is odd")
    h = a.shape[1] // 2
    return a[:, :h] * sigmoid(a[:, h:])


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = False


class Var:
    """Handle to one node of a tape; supports ``+ - * @`` for readability."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    def _lift(self, other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise GraphError("cannot mix nodes from different tapes")
            return other
        return None

    def __add__(self, other):
        o = self._lift(other)
        return self.tape.add(self, o) if o is not None else self.tape.shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return self.tape.sub(self, o) if o is not None else self.tape.shift(self, -float(other))

    def __rsub__(self, other):
        return self.tape.shift(self.tape.scale(self, -1.0), float(other))

    def __mul__(self, other):
        o = self._lift(other)
        return self.tape.mul(self, o) if o is not None else self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.scale(self, 1.0 / float(other))

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self):
        node = self.tape.nodes[self.idx]
        return f"Var({self.idx}, {node.op}{'' if node.name is None else ' ' + node.name})"


class Tape:
    """Static computation graph with cached forward values and reverse sweep."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.output: Var | None = None
        self._values: list | None = None

    # -- construction -------------------------------------------------
    def _push(self, op, inputs=(), name=None, **attrs):
        for v in inputs:
            if v.tape is not self:
                raise GraphError("cannot mix nodes from different tapes")
        rg = any(self.nodes[v.idx].requires_grad for v in inputs)
        self.nodes.append(Node(op, tuple(v.idx for v in inputs), attrs, name, rg))
        self._values = None
        return Var(self, len(self.nodes) - 1)

    def input(self, name, cols=None, rows=None, requires_grad=False):
        """Declare a named input; ``cols``/``rows`` pin the expected shape."""
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        v = self._push("input", (), name, cols=cols, rows=rows)
        self.nodes[v.idx].requires_grad = requires_grad
        self.inputs[name] = v.idx
        return v

    def set_output(self, v):
        self.output = v
        return v

    def matmul(self, a, b):
        return self._push("matmul", (a, b))

    def add(self, a, b):
        """Elementwise sum; ``b`` may also be a single row broadcast over ``a``."""
        return self._push("add", (a, b))

    def sub(self, a, b):
        return self._push("sub", (a, b))

    def mul(self, a, b):
        return self._push("mul", (a, b))

    def scale(self, a, c):
        return self._push("scale", (a,), c=float(c))

    def shift(self, a, c):
        return self._push("shift", (a,), c=float(c))

    def glu(self, a):
        return self._push("glu", (a,))

    def relu(self, a):
        return self._push("relu", (a,))

    def neg_relu(self, a):
        """max(-a, 0)."""
        return self._push("neg_relu", (a,))

    def sigmoid(self, a):
        return self._push("sigmoid", (a,))

    def softplus(self, a):
        return self._push("softplus", (a,))

    def abs(self, a):
        return self._push("abs", (a,))

    def sum(self, a):
        return self._push("sum", (a,))

    def mean(self, a):
        return self._push("mean", (a,))

    def concat(self, vs, axis=0):
        if not vs:
            raise GraphError("concat of nothing")
        return self._push("concat", tuple(vs), axis=int(axis))

    def row_block(self, a, k, n_blocks):
        """k-th of ``n_blocks`` equal row blocks of ``a``."""
        if not 0 <= k < n_blocks:
            raise GraphError(f"row_block index {k} outside 0..{n_blocks - 1}")
        return self._push("row_block", (a,), k=int(k), n=int(n_blocks))

    def tile_rows(self, a, k):
        """Stack ``k`` copies of ``a`` vertically."""
        return self._push("tile_rows", (a,), k=int(k))

    def stop_gradient(self, a):
        """Identity in the forward pass; no adjoint flows back through it."""
        v = self._push("stop_gradient", (a,))
        self.nodes[v.idx].requires_grad = False
        return v

    def zeros(self, like, cols):
        """Constant zeros with the row count of ``like``."""
        return self._push("zeros", (like,), cols=int(cols))

    # -- evaluation ---------------------------------------------------
    def _fail(self, i, msg):
        node = self.nodes[i]
        label = f"node {i} ({node.op}{'' if node.name is None else ' ' + node.name})"
        raise GraphError(f"{label}: {msg}")

    def forward(self, inputs, output=None):
        """Evaluate the graph; returns the value of ``output`` (default: the tape output)."""
        vals = [None] * len(self.nodes)
        missing = set(self.inputs) - set(inputs)
        if missing:
            raise GraphError(f"missing inputs: {sorted(missing)}")
        for i, node in enumerate(self.nodes):
            op = node.op
            a = [vals[j] for j in node.inputs]
            if op == "input":
                try:
                    v = as_tensor2(inputs[node.name], node.name)
                except GraphError as exc:
                    self._fail(i, str(exc))
                cols, rows = node.attrs["cols"], node.attrs["rows"]
                if cols is not None and v.shape[1] != cols:
                    self._fail(i, f"expected {cols} columns, got {v.shape[1]}")
                if rows is not None and v.shape[0] != rows:
                    self._fail(i, f"expected {rows} rows, got {v.shape[0]}")
            elif op == "matmul":
                if a[0].shape[1] != a[1].shape[0]:
                    self._fail(i, f"cannot multiply {a[0].shape} by {a[1].shape}")
                v = a[0] @ a[1]
            elif op == "add":
                if a[0].shape != a[1].shape and not (
                    a[1].shape[0] == 1 and a[1].shape[1] == a[0].shape[1]
                ):
                    self._fail(i, f"cannot add {a[1].shape} to {a[0].shape}")
                v = a[0] + a[1]
            elif op in ("sub", "mul"):
                if a[0].shape != a[1].shape:
                    self._fail(i, f"shape mismatch {a[0].shape} vs {a[1].shape}")
                v = a[0] - a[1] if op == "sub" else a[0] * a[1]
            elif op == "scale":
                v = a[0] * node.attrs["c"]
            elif op == "shift":
                v = a[0] + node.attrs["c"]
            elif op == "glu":
                if a[0].shape[1] % 2:
                    self._fail(i, f"glu input width {a[0].shape[1]} is odd")
                h = a[0].shape[1] // 2
                v = a[0][:, :h] * sigmoid(a[0][:, h:])
            elif op == "relu":
                v = np.maximum(a[0], 0.0)
            elif op == "neg_relu":
                v = np.maximum(-a[0], 0.0)
            elif op == "sigmoid":
                v = sigmoid(a[0])
            elif op == "softplus":
                v = softplus(a[0])
            elif op == "abs":
                v = np.abs(a[0])
            elif op == "sum":
                v = np.sum(a[0]).reshape(1, 1)
            elif op == "mean":
                if a[0].size == 0:
                    self._fail(i, "mean of an empty tensor")
                v = np.mean(a[0]).reshape(1, 1)
            elif op == "concat":
                ax = node.attrs["axis"]
                other = 1 - ax
                if len({t.shape[other] for t in a}) != 1:
                    self._fail(i, f"concat axis {ax}: shapes {[t.shape for t in a]}")
                v = np.concatenate(a, axis=ax)
            elif op == "row_block":
                n, k = node.attrs["n"], node.attrs["k"]
                if a[0].shape[0] % n:
                    self._fail(i, f"{a[0].shape[0]} rows do not split into {n} blocks")
                b = a[0].shape[0] // n
                v = a[0][k * b:(k + 1) * b]
            elif op == "tile_rows":
                v = np.tile(a[0], (node.attrs["k"], 1))
            elif op == "zeros":
                v = np.zeros((a[0].shape[0], node.attrs["cols"]))
            elif op == "stop_gradient":
                v = a[0]
            else:  # pragma: no cover
                self._fail(i, "unknown op")
            vals[i] = v
        self._values = vals
        out = output if output is not None else self.output
        if out is None:
            return None
        return vals[out.idx]

    def value(self, v):
        if self._values is None:
            raise GraphError("forward has not been run on this tape")
        return self._values[v.idx]

    def backward(self, seed=1.0, output=None):
        """Adjoints of ``seed . output`` with respect to every requires_grad input."""
        if self._values is None:
            raise GraphError("backward called before forward")
        out = output if output is not None else self.output
        if out is None:
            raise GraphError("tape has no output")
        vals = self._values
        seed = np.asarray(seed, dtype=np.float64)
        if seed.ndim < 2:
            seed = np.broadcast_to(seed.reshape((1,) * (2 - seed.ndim) + seed.shape), vals[out.idx].shape)
        if seed.shape != vals[out.idx].shape:
            raise GraphError(f"seed shape {seed.shape} does not match output {vals[out.idx].shape}")
        adj = [None] * len(self.nodes)
        adj[out.idx] = np.array(seed, dtype=np.float64)

        def acc(j, g):
            if not self.nodes[j].requires_grad:
                return
            if adj[j] is None:
                adj[j] = g
            else:
                adj[j] = adj[j] + g

        for i in range(out.idx, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.op == "input" or not node.requires_grad:
                continue
            ins = node.inputs
            x = [vals[j] for j in ins]
            op = node.op
            if op == "matmul":
                acc(ins[0], g @ x[1].T)
                acc(ins[1], x[0].T @ g)
            elif op == "add":
                acc(ins[0], g)
                acc(ins[1], g if x[1].shape == g.shape else g.sum(axis=0, keepdims=True))
            elif op == "sub":
                acc(ins[0], g)
                acc(ins[1], -g)
            elif op == "mul":
                acc(ins[0], g * x[1])
                acc(ins[1], g * x[0])
            elif op == "scale":
                acc(ins[0], g * node.attrs["c"])
            elif op == "shift":
                acc(ins[0], g)
            elif op == "glu":
                h = x[0].shape[1] // 2
                lin, s = x[0][:, :h], sigmoid(x[0][:, h:])
                acc(ins[0], np.concatenate([g * s, g * lin * s * (1.0 - s)], axis=1))
            elif op == "relu":
                acc(ins[0], g * (x[0] > 0))
            elif op == "neg_relu":
                acc(ins[0], -g * (x[0] < 0))
            elif op == "sigmoid":
                s = vals[i]
                acc(ins[0], g * s * (1.0 - s))
            elif op == "softplus":
                acc(ins[0], g * sigmoid(x[0]))
            elif op == "abs":
                acc(ins[0], g * np.sign(x[0]))
            elif op == "sum":
                acc(ins[0], np.full(x[0].shape, g[0, 0]))
            elif op == "mean":
                acc(ins[0], np.full(x[0].shape, g[0, 0] / x[0].size))
            elif op == "concat":
                ax = node.attrs["axis"]
                start = 0
                for j, t in zip(ins, x):
                    stop = start + t.shape[ax]
                    acc(j, g[start:stop] if ax == 0 else g[:, start:stop])
                    start = stop
            elif op == "row_block":
                n, k = node.attrs["n"], node.attrs["k"]
                b = x[0].shape[0] // n
                full = np.zeros_like(x[0])
                full[k * b:(k + 1) * b] = g
                acc(ins[0], full)
            elif op == "tile_rows":
                k = node.attrs["k"]
                acc(ins[0], g.reshape(k, -1, g.shape[1]).sum(axis=0))
            # zeros: constant, nothing flows back

        grads = {}
        for name, j in self.inputs.items():
            if self.nodes[j].requires_grad:
                grads[name] = adj[j] if adj[j] is not None else np.zeros_like(vals[j])
        return grads
