"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Values are computed eagerly when an op is recorded; the tape keeps each
node's inputs and whatever the adjoint needs.  ``backward`` walks the tape
in reverse insertion order, so accumulation order (and therefore the bits of
every gradient) is fixed for a given program.

Usage::

    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = sum_(x * x)
    backward(tape, y, x)   # -> array([6.])
"""
from dataclasses import dataclass, field

import numpy as np

from latmask import kernels
from latmask.errors import ContractError, NumericalError

__all__ = [
    "Tape", "Var", "forward", "backward", "grad_check", "GradCheckReport",
    "add", "sub", "mul", "div", "neg", "abs_", "sqrt", "log", "exp",
    "sigmoid", "tanh", "relu", "maximum", "matmul", "conv1d",
    "conv_transpose1d", "sum_", "mean", "reshape", "transpose", "pad",
    "crop", "frame", "overlap_add", "take", "concat", "PRIMITIVES",
]


@dataclass(slots=True)
class Node:
    op: str
    inputs: tuple
    value: np.ndarray
    saved: dict = field(default_factory=dict)
    requires_grad: bool = False


class Tape:
    """Append-only record of a computation.

    ``dtype`` is the working precision of every recorded value; float64 for
    gradient checks, float32 for production runs.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=True):
        """Differentiable input."""
        return self._record("leaf", (), np.array(value, dtype=self.dtype), requires_grad=requires_grad)

    def const(self, value):
        """Input that never receives a gradient."""
        return self._record("const", (), np.asarray(value, dtype=self.dtype), requires_grad=False)

    def _lift(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("variables from different tapes cannot be combined")
            return x
        return self.const(x)

    def _record(self, op, inputs, value, saved=None, requires_grad=None):
        if op not in _ADJOINTS and op not in ("leaf", "const"):
            raise ContractError(f"unregistered op {op!r}")
        node_id = len(self.nodes)
        value = np.asarray(value)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite value produced by {op!r} at node {node_id}", node=node_id)
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), value, saved or {}, requires_grad))
        return Var(self, node_id)


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise ContractError("at least one operand must be a tape variable")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(op, a, b, fn):
    tape = _tape_of(a, b)
    a, b = tape._lift(a), tape._lift(b)
    return tape._record(op, (a.id, b.id), fn(a.value, b.value))


def _unary(op, a, value, **saved):
    return a.tape._record(op, (a.id,), value, saved)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    return _binary("add", a, b, np.add)


def sub(a, b):
    return _binary("sub", a, b, np.subtract)


def mul(a, b):
    return _binary("mul", a, b, np.multiply)


def _quiet(fn):
    # non-finite results are reported by the tape as NumericalError, not as warnings
    def wrapped(*args):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return fn(*args)
    return wrapped


def div(a, b):
    return _binary("div", a, b, _quiet(np.divide))


def maximum(a, b):
    """Elementwise max; ties route the adjoint to ``a``."""
    return _binary("maximum", a, b, np.maximum)


def neg(a):
    return _unary("neg", a, -a.value)


def abs_(a):
    return _unary("abs", a, np.abs(a.value))


def sqrt(a):
    return _unary("sqrt", a, _quiet(np.sqrt)(a.value))


def log(a):
    return _unary("log", a, _quiet(np.log)(a.value))


def exp(a):
    return _unary("exp", a, _quiet(np.exp)(a.value))


def sigmoid(a):
    x = a.value
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _unary("sigmoid", a, out)


def tanh(a):
    return _unary("tanh", a, np.tanh(a.value))


def relu(a):
    return _unary("relu", a, np.maximum(a.value, 0))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """``a @ b`` with ``a`` (..., m, k) and ``b`` (k, n) or (..., k, n)."""
    tape = _tape_of(a, b)
    a, b = tape._lift(a), tape._lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")
    return tape._record("matmul", (a.id, b.id), a.value @ b.value)


def conv1d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (B, Cin, L) with ``w`` (Cout, Cin, K)."""
    tape = _tape_of(x, w)
    x, w = tape._lift(x), tape._lift(w)
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[1] != wv.shape[1]:
        raise ContractError(f"conv1d shape mismatch: x {xv.shape}, w {wv.shape}")
    bsz, cin, _ = xv.shape
    cout, _, k = wv.shape
    if padding:
        xv = np.pad(xv, ((0, 0), (0, 0), (padding, padding)))
    lpad = xv.shape[-1]
    if lpad < k:
        raise ContractError(f"conv1d input length {lpad} shorter than kernel {k}")
    cols = kernels.frame(xv, k, stride)  # (B, Cin, T, K)
    t = cols.shape[2]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(bsz, t, cin * k)
    out = cols @ wv.reshape(cout, cin * k).T
    inputs = [x.id, w.id]
    if b is not None:
        b = tape._lift(b)
        out = out + b.value
        inputs.append(b.id)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    saved = {"cols": cols, "stride": stride, "padding": padding, "lpad": lpad}
    return tape._record("conv1d", inputs, out, saved)


def conv_transpose1d(x, w, b=None, stride=1, padding=0):
    """Transposed convolution of ``x`` (B, Cin, L) with ``w`` (Cin, Cout, K).

    Output length is ``(L - 1) * stride + K - 2 * padding``.
    """
    tape = _tape_of(x, w)
    x, w = tape._lift(x), tape._lift(w)
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[1] != wv.shape[0]:
        raise ContractError(f"conv_transpose1d shape mismatch: x {xv.shape}, w {wv.shape}")
    bsz, cin, length = xv.shape
    _, cout, k = wv.shape
    full = (length - 1) * stride + k
    xt = np.ascontiguousarray(xv.transpose(0, 2, 1))
    cols = (xt @ wv.reshape(cin, cout * k)).reshape(bsz, length, cout, k)
    out = kernels.overlap_add(cols.transpose(0, 2, 1, 3), stride, full)
    out = out[:, :, padding:full - padding]
    inputs = [x.id, w.id]
    if b is not None:
        b = tape._lift(b)
        out = out + b.value[:, None]
        inputs.append(b.id)
    saved = {"xt": xt, "stride": stride, "padding": padding, "full": full}
    return tape._record("conv_transpose1d", inputs, np.ascontiguousarray(out), saved)


# -- reductions and shape ----------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    return _unary("sum", a, np.sum(a.value, axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return _unary("mean", a, np.mean(a.value, axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return _unary("reshape", a, a.value.reshape(shape))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return _unary("transpose", a, np.ascontiguousarray(np.transpose(a.value, axes)), axes=tuple(axes))


def pad(a, left, right, mode="constant"):
    """Pad the last axis; ``mode`` is ``"constant"`` (zeros) or ``"reflect"``."""
    n = a.shape[-1]
    if mode == "reflect" and (left >= n or right >= n):
        raise ContractError(f"reflect padding ({left}, {right}) needs more than {n} samples")
    if mode not in ("constant", "reflect"):
        raise ContractError(f"unknown pad mode {mode!r}")
    widths = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    return _unary("pad", a, np.pad(a.value, widths, mode=mode), left=left, right=right, mode=mode)


def crop(a, start, stop):
    """Slice ``[start:stop]`` of the last axis."""
    n = a.shape[-1]
    if not 0 <= start <= stop <= n:
        raise ContractError(f"crop [{start}:{stop}] outside axis of length {n}")
    return _unary("crop", a, np.ascontiguousarray(a.value[..., start:stop]), start=start, n=n)


def frame(a, size, hop):
    """Overlapping frames of the last axis: (..., L) -> (..., T, size)."""
    return _unary("frame", a, kernels.frame(a.value, size, hop), hop=hop, n=a.shape[-1])


def overlap_add(a, hop, length):
    """Overlap-add frames (..., T, size) into (..., length)."""
    return _unary("overlap_add", a, kernels.overlap_add(a.value, hop, length), hop=hop)


def take(a, indices, axis=0):
    indices = np.asarray(indices, dtype=np.intp)
    return _unary("take", a, np.take(a.value, indices, axis=axis), indices=indices, axis=axis)


def concat(xs, axis=0):
    tape = _tape_of(*xs)
    xs = [tape._lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    value = np.concatenate([x.value for x in xs], axis=axis)
    return tape._record("concat", [x.id for x in xs], value, {"axis": axis, "sizes": sizes})


# -- adjoints ----------------------------------------------------------------
# signature: (g, node, values) -> tuple of input gradients (None = no grad)

def _adj_add(g, node, v):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _adj_sub(g, node, v):
    return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)


def _adj_mul(g, node, v):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _adj_div(g, node, v):
    a, b = v
    ga = g / b
    return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a / b, b.shape)


def _adj_maximum(g, node, v):
    a, b = v
    first = a >= b
    return _unbroadcast(np.where(first, g, 0), a.shape), _unbroadcast(np.where(first, 0, g), b.shape)


def _adj_neg(g, node, v):
    return (-g,)


def _adj_abs(g, node, v):
    return (g * np.sign(v[0]),)


def _adj_sqrt(g, node, v):
    return (g * 0.5 / node.value,)


def _adj_log(g, node, v):
    return (g / v[0],)


def _adj_exp(g, node, v):
    return (g * node.value,)


def _adj_sigmoid(g, node, v):
    s = node.value
    return (g * s * (1 - s),)


def _adj_tanh(g, node, v):
    t = node.value
    return (g * (1 - t * t),)


def _adj_relu(g, node, v):
    return (g * (v[0] > 0),)


def _adj_matmul(g, node, v):
    a, b = v
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        k, n = b.shape
        gb = a.reshape(-1, k).T @ g.reshape(-1, n)
    else:
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return _unbroadcast(ga, a.shape), gb


def _adj_conv1d(g, node, v):
    x, w = v[0], v[1]
    s = node.saved
    cols, stride, padding, lpad = s["cols"], s["stride"], s["padding"], s["lpad"]
    bsz, cin, length = x.shape
    cout, _, k = w.shape
    t = cols.shape[1]
    gt = np.ascontiguousarray(g.transpose(0, 2, 1))  # (B, T, Cout)
    gw = (gt.reshape(-1, cout).T @ cols.reshape(-1, cin * k)).reshape(w.shape)
    gcols = (gt @ w.reshape(cout, cin * k)).reshape(bsz, t, cin, k).transpose(0, 2, 1, 3)
    gx = kernels.overlap_add(gcols, stride, lpad)[:, :, padding:padding + length]
    grads = [np.ascontiguousarray(gx), gw]
    if len(v) == 3:
        grads.append(g.sum(axis=(0, 2)))
    return tuple(grads)


def _adj_conv_transpose1d(g, node, v):
    x, w = v[0], v[1]
    s = node.saved
    xt, stride, padding, full = s["xt"], s["stride"], s["padding"], s["full"]
    bsz, cin, length = x.shape
    _, cout, k = w.shape
    gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding)))
    fr = kernels.frame(gfull, k, stride)  # (B, Cout, L, K)
    fr = np.ascontiguousarray(fr.transpose(0, 2, 1, 3)).reshape(bsz, length, cout * k)
    gx = (fr @ w.reshape(cin, cout * k).T).transpose(0, 2, 1)
    gw = (xt.reshape(-1, cin).T @ fr.reshape(-1, cout * k)).reshape(w.shape)
    grads = [np.ascontiguousarray(gx), gw]
    if len(v) == 3:
        grads.append(g.sum(axis=(0, 2)))
    return tuple(grads)


def _expand_reduced(g, node, shape):
    axis, keepdims = node.saved["axis"], node.saved["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _adj_sum(g, node, v):
    return (np.array(_expand_reduced(g, node, v[0].shape)),)


def _adj_mean(g, node, v):
    count = v[0].size // max(node.value.size, 1)
    return (np.array(_expand_reduced(g, node, v[0].shape)) / count,)


def _adj_reshape(g, node, v):
    return (g.reshape(v[0].shape),)


def _adj_transpose(g, node, v):
    return (np.ascontiguousarray(np.transpose(g, np.argsort(node.saved["axes"]))),)


def _adj_pad(g, node, v):
    left, right, mode = node.saved["left"], node.saved["right"], node.saved["mode"]
    n = v[0].shape[-1]
    gx = np.array(g[..., left:left + n])
    if mode == "reflect":
        if left:
            gx[..., 1:left + 1] += g[..., :left][..., ::-1]
        if right:
            gx[..., n - 1 - right:n - 1] += g[..., left + n:][..., ::-1]
    return (gx,)


def _adj_crop(g, node, v):
    start, n = node.saved["start"], node.saved["n"]
    widths = [(0, 0)] * (g.ndim - 1) + [(start, n - start - g.shape[-1])]
    return (np.pad(g, widths),)


def _adj_frame(g, node, v):
    return (kernels.overlap_add(g, node.saved["hop"], node.saved["n"]),)


def _adj_overlap_add(g, node, v):
    size = v[0].shape[-1]
    return (kernels.frame(g, size, node.saved["hop"]),)


def _adj_take(g, node, v):
    gx = np.zeros_like(v[0])
    axis, idx = node.saved["axis"], node.saved["indices"]
    np.add.at(gx, (slice(None),) * (axis % gx.ndim) + (idx,), g)
    return (gx,)


def _adj_concat(g, node, v):
    axis = node.saved["axis"]
    bounds = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))


_ADJOINTS = {
    "add": _adj_add, "sub": _adj_sub, "mul": _adj_mul, "div": _adj_div,
    "maximum": _adj_maximum, "neg": _adj_neg, "abs": _adj_abs, "sqrt": _adj_sqrt,
    "log": _adj_log, "exp": _adj_exp, "sigmoid": _adj_sigmoid, "tanh": _adj_tanh,
    "relu": _adj_relu, "matmul": _adj_matmul, "conv1d": _adj_conv1d,
    "conv_transpose1d": _adj_conv_transpose1d, "sum": _adj_sum, "mean": _adj_mean,
    "reshape": _adj_reshape, "transpose": _adj_transpose, "pad": _adj_pad,
    "crop": _adj_crop, "frame": _adj_frame, "overlap_add": _adj_overlap_add,
    "take": _adj_take, "concat": _adj_concat,
}

PRIMITIVES = frozenset(_ADJOINTS)


# -- driver ------------------------------------------------------------------

def _node_id(tape, ref):
    node_id = ref.id if isinstance(ref, Var) else int(ref)
    if not 0 <= node_id < len(tape.nodes):
        raise ContractError(f"node {node_id} not on tape")
    return node_id


def forward(tape, root):
    """Value at ``root``; intermediates stay cached on the tape."""
    return tape.nodes[_node_id(tape, root)].value


def backward(tape, root, wrt):
    """Gradient of scalar ``root`` w.r.t. ``wrt`` (a node or a list of nodes).

    Nodes that do not influence ``root`` get exact zeros.
    """
    root_id = _node_id(tape, root)
    nodes = tape.nodes
    if nodes[root_id].value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {nodes[root_id].value.shape}")
    single = not isinstance(wrt, (list, tuple))
    targets = [_node_id(tape, w) for w in ([wrt] if single else wrt)]

    grads = [None] * (root_id + 1)
    grads[root_id] = np.ones_like(nodes[root_id].value)
    for i in range(root_id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or not node.inputs:
            continue
        grads[i] = None if i not in targets else g
        values = [nodes[j].value for j in node.inputs]
        in_grads = _ADJOINTS[node.op](g, node, values)
        for j, gj in zip(node.inputs, in_grads):
            if gj is None or not nodes[j].requires_grad:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj

    out = []
    for t in targets:
        g = grads[t] if t <= root_id else None
        out.append(np.zeros_like(nodes[t].value) if g is None else np.asarray(g, dtype=tape.dtype))
    return out[0] if single else out


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f, x, h=1e-6, tol=1e-4, indices=None):
    """Compare ``backward`` with central differences.

    ``f(tape, var)`` must build a scalar-rooted computation from ``var``.
    ``indices`` restricts the comparison to a subset of flat positions.
    Relative error is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)

    def evaluate(point):
        tape = Tape(np.float64)
        return float(forward(tape, f(tape, tape.leaf(point))).reshape(()))

    tape = Tape(np.float64)
    var = tape.leaf(x)
    root = f(tape, var)
    analytic = backward(tape, root, var)
    first = float(root.value.reshape(()))
    if evaluate(x) != first:
        raise NumericalError("function is not deterministic between evaluations")

    flat_idx = np.arange(x.size) if indices is None else np.asarray(indices)
    numeric = np.zeros(len(flat_idx))
    for n, i in enumerate(flat_idx):
        step = np.zeros(x.size)
        step[i] = h
        step = step.reshape(x.shape)
        numeric[n] = (evaluate(x + step) - evaluate(x - step)) / (2 * h)
    a = analytic.reshape(-1)[flat_idx]
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, worst <= tol, analytic, numeric)
