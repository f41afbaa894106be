"""Dense float64 tensors recorded on a tape for reverse-mode differentiation.

The tape is rebuilt for every forward pass (define-by-run) and consumed by a
single ``backward`` call.  Tensors created through ``Tape.leaf`` receive
gradients; anything derived from a recorded tensor is recorded automatically.
Plain arrays, python scalars and ``constant`` tensors act as fixed
coefficients and never accumulate gradients.

Broadcasting is deliberately restricted to the two cases the network needs:
scalar-with-tensor and per-channel vectors ``(C,)`` against ``NCHW`` feature
maps.  Anything else raises ``ShapeError``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tape",
    "Tensor",
    "constant",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "power",
    "absolute",
    "clamp",
    "sigmoid",
    "relu",
    "sqrt",
    "log",
    "mean",
    "tensor_sum",
    "reshape",
    "concat_channels",
    "slice_channels",
    "conv2d",
    "upsample_bilinear2x",
    "apply_op",
    "backward",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Operand shapes fall outside the permitted broadcasts."""


class TapeError(RuntimeError):
    """Tape misuse: mixed tapes, double consumption, or a non-scalar loss."""


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "tensor")

    def __init__(self, op, inputs, backward_fn, tensor=None):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tensor = tensor


class Tape:
    """Ordered operation record; every node's inputs precede it."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[int, ...], backward_fn, tensor=None) -> int:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(_Node(op, inputs, backward_fn, tensor))
        return len(self.nodes) - 1

    def leaf(self, data) -> "Tensor":
        """Record ``data`` as a differentiable input of this tape."""
        t = Tensor(data)
        t.tape = self
        t.node_id = self.record("leaf", (), None, tensor=t)
        return t


class Tensor:
    """N-dimensional float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # 0-d stays 0-d: ascontiguousarray would promote it
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; scalars and plain arrays are treated as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def mean(self):
        return mean(self)

    def sum(self):
        return tensor_sum(self)

    def abs(self):
        return absolute(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)

    def log(self):
        return log(self)

    def reshape(self, shape):
        return reshape(self, shape)


def constant(data) -> Tensor:
    """Tensor outside any recording context (no node id, no gradient)."""
    return Tensor(data)


def _operand(x) -> tuple[np.ndarray, Tensor | None]:
    if isinstance(x, Tensor):
        return x.data, x
    return np.asarray(x, dtype=np.float64), None


def _common_tape(*tensors: Tensor | None) -> Tape | None:
    tape = None
    for t in tensors:
        if t is None or t.node_id is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands recorded on different tapes")
    return tape


def _result(op: str, out_data: np.ndarray, entries) -> Tensor:
    """Wrap ``out_data``; ``entries`` is a list of (parent Tensor, grad_fn)."""
    tape = _common_tape(*[t for t, _ in entries])
    res = Tensor(out_data)
    if tape is None:
        return res
    recorded = [(t.node_id, fn) for t, fn in entries if t is not None and t.node_id is not None]
    ids = tuple(nid for nid, _ in recorded)

    def backward_fn(g, recorded=recorded):
        return [(nid, fn(g)) for nid, fn in recorded]

    res.tape = tape
    res.node_id = tape.record(op, ids, backward_fn)
    return res


def apply_op(op: str, out_data, parents: Sequence, grad_fns: Sequence[Callable]) -> Tensor:
    """Record a custom operation.

    ``parents`` may mix tensors and constants; ``grad_fns[i]`` maps the output
    gradient to the gradient w.r.t. ``parents[i]`` and is only invoked for
    recorded parents.
    """
    entries = []
    for p, fn in zip(parents, grad_fns):
        entries.append((p if isinstance(p, Tensor) else None, fn))
    return _result(op, np.asarray(out_data, dtype=np.float64), entries)


# -- restricted broadcasting -------------------------------------------------

_FULL, _SCALAR, _CHANNEL = "full", "scalar", "channel"


def _broadcast_sides(sa: tuple, sb: tuple) -> tuple[str, str]:
    """Reduction rule for each operand's gradient, or ShapeError."""
    if sa == sb:
        return _FULL, _FULL
    if sb == ():
        return _FULL, _SCALAR
    if sa == ():
        return _SCALAR, _FULL
    if len(sa) == 4 and sb == (sa[1],):
        return _FULL, _CHANNEL
    if len(sb) == 4 and sa == (sb[1],):
        return _CHANNEL, _FULL
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


def _expand(arr: np.ndarray, side: str) -> np.ndarray:
    if side == _CHANNEL:
        return arr.reshape(1, arr.shape[0], 1, 1)
    return arr


def _reduce(g: np.ndarray, side: str) -> np.ndarray:
    if side == _FULL:
        return g
    if side == _SCALAR:
        return np.asarray(g.sum())
    return g.sum(axis=(0, 2, 3))


def _binary(op, a, b, forward, grad_a, grad_b) -> Tensor:
    ad, at = _operand(a)
    bd, bt = _operand(b)
    side_a, side_b = _broadcast_sides(ad.shape, bd.shape)
    ae, be = _expand(ad, side_a), _expand(bd, side_b)
    out = forward(ae, be)
    entries = []
    if at is not None:
        entries.append((at, lambda g, ae=ae, be=be, out=out, s=side_a: _reduce(grad_a(g, ae, be, out), s)))
    if bt is not None:
        entries.append((bt, lambda g, ae=ae, be=be, out=out, s=side_b: _reduce(grad_b(g, ae, be, out), s)))
    return _result(op, out, entries)


def _unary(op, a, forward, grad) -> Tensor:
    ad, at = _operand(a)
    out = forward(ad)
    entries = []
    if at is not None:
        entries.append((at, lambda g, ad=ad, out=out: grad(g, ad, out)))
    return _result(op, out, entries)


# -- elementwise kinds ---------------------------------------------------------

def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g,
                   lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g,
                   lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y,
                   lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * o / y)


def neg(a) -> Tensor:
    return _unary("neg", a, lambda x: -x, lambda g, x, o: -g)


def power(a, p) -> Tensor:
    p = float(p)
    return _unary("pow", a, lambda x: x ** p,
                  lambda g, x, o: g * p * x ** (p - 1.0))


def absolute(a) -> Tensor:
    # subgradient 0 at x == 0 (np.sign(0) == 0)
    return _unary("abs", a, np.abs, lambda g, x, o: g * np.sign(x))


def clamp(a, lo=None, hi=None) -> Tensor:
    def fwd(x):
        return np.clip(x, lo, hi)

    def grad(g, x, o):
        mask = np.ones_like(x)
        if lo is not None:
            mask *= x > lo  # subgradient 0 at the kink
        if hi is not None:
            mask *= x < hi
        return g * mask

    return _unary("clamp", a, fwd, grad)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a, _sigmoid_stable,
                  lambda g, x, o: g * o * (1.0 - o))


def relu(a) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, o: g * (x > 0.0))


def sqrt(a) -> Tensor:
    return _unary("sqrt", a, np.sqrt, lambda g, x, o: g / (2.0 * o))


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda g, x, o: g / x)


def mean(a) -> Tensor:
    ad, at = _operand(a)
    out = np.asarray(ad.mean())
    entries = []
    if at is not None:
        n = ad.size
        entries.append((at, lambda g, n=n, shape=ad.shape: np.full(shape, float(g) / n)))
    return _result("mean", out, entries)


def tensor_sum(a) -> Tensor:
    ad, at = _operand(a)
    out = np.asarray(ad.sum())
    entries = []
    if at is not None:
        entries.append((at, lambda g, shape=ad.shape: np.full(shape, float(g))))
    return _result("sum", out, entries)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "pow": power,
    "abs": absolute,
    "clamp": clamp,
    "sigmoid": sigmoid,
    "relu": relu,
    "sqrt": sqrt,
    "log": log,
    "mean": mean,
    "sum": tensor_sum,
}


def elementwise(op_kind: str, a, b=None, **kw) -> Tensor:
    """Dispatch by kind; binary kinds require ``b``, unary kinds forbid it."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {op_kind!r}")
    fn = _ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    if op_kind == "pow":
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op_kind} is unary")
    return fn(a, **kw)


# -- structural ops ------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    ad, at = _operand(a)
    shape = tuple(shape)
    out = ad.reshape(shape)
    entries = []
    if at is not None:
        entries.append((at, lambda g, s=ad.shape: np.ascontiguousarray(g).reshape(s)))
    return _result("reshape", out, entries)


def concat_channels(a, b) -> Tensor:
    ad, at = _operand(a)
    bd, bt = _operand(b)
    if ad.ndim != 4 or bd.ndim != 4 or ad.shape[0] != bd.shape[0] or ad.shape[2:] != bd.shape[2:]:
        raise ShapeError(f"cannot concatenate channels of {ad.shape} and {bd.shape}")
    ca = ad.shape[1]
    out = np.concatenate([ad, bd], axis=1)
    entries = []
    if at is not None:
        entries.append((at, lambda g, ca=ca: np.ascontiguousarray(g[:, :ca])))
    if bt is not None:
        entries.append((bt, lambda g, ca=ca: np.ascontiguousarray(g[:, ca:])))
    return _result("concat", out, entries)


def slice_channels(a, c0: int, c1: int) -> Tensor:
    ad, at = _operand(a)
    if ad.ndim != 4 or not (0 <= c0 < c1 <= ad.shape[1]):
        raise ShapeError(f"bad channel slice [{c0}:{c1}] of {ad.shape}")
    out = np.ascontiguousarray(ad[:, c0:c1])

    def grad(g, shape=ad.shape, c0=c0, c1=c1):
        full = np.zeros(shape)
        full[:, c0:c1] = g
        return full

    entries = [(at, grad)] if at is not None else []
    return _result("slice", out, entries)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = padded_shape[0], padded_shape[1]
    gxp = np.zeros(padded_shape)
    gc = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gc[:, :, i, j]
    return gxp


def conv2d(x, w, b=None, *, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input against OIHW kernel, zero padding."""
    xd, xt = _operand(x)
    wd, wt = _operand(w)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW kernel")
    n, c, h, wdt = xd.shape
    o, i, kh, kw = wd.shape
    if c != i:
        raise ShapeError(f"input channels {c} != kernel input channels {i}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wdt + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"non-positive conv output dims ({oh}, {ow})")
    bd, bt = (None, None)
    if b is not None:
        bd, bt = _operand(b)
        if bd.shape != (o,):
            raise ShapeError(f"bias shape {bd.shape} != ({o},)")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = wd.reshape(o, c * kh * kw)
    out2 = np.matmul(w2, cols)  # (N, O, OH*OW)
    if bd is not None:
        out2 = out2 + bd.reshape(1, o, 1)
    out = out2.reshape(n, o, oh, ow)

    entries = []
    if xt is not None:
        def grad_x(g, w2=w2, shape_p=xp.shape):
            g2 = g.reshape(n, o, oh * ow)
            gcols = np.matmul(w2.T, g2)
            gxp = _col2im(gcols, shape_p, kh, kw, stride, oh, ow)
            if pad:
                gxp = gxp[:, :, pad:pad + h, pad:pad + wdt]
            return np.ascontiguousarray(gxp)
        entries.append((xt, grad_x))
    if wt is not None:
        def grad_w(g, cols=cols):
            g2 = g.reshape(n, o, oh * ow)
            gw2 = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            return gw2.reshape(o, c, kh, kw)
        entries.append((wt, grad_w))
    if bt is not None:
        entries.append((bt, lambda g: g.sum(axis=(0, 2, 3))))
    return _result("conv2d", out, entries)


def _up2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    out = np.empty(x.shape[:-1] + (2 * n,))
    if n == 1:
        out[..., 0] = x[..., 0]
        out[..., 1] = x[..., 0]
    else:
        out[..., 0] = x[..., 0]
        out[..., 2::2] = 0.25 * x[..., :-1] + 0.75 * x[..., 1:]
        out[..., 1:-1:2] = 0.75 * x[..., :-1] + 0.25 * x[..., 1:]
        out[..., -1] = x[..., -1]
    return np.moveaxis(out, -1, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int, n: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    gx = np.zeros(g.shape[:-1] + (n,))
    if n == 1:
        gx[..., 0] = g[..., 0] + g[..., 1]
    else:
        gx[..., 0] += g[..., 0]
        gx[..., :-1] += 0.25 * g[..., 2::2]
        gx[..., 1:] += 0.75 * g[..., 2::2]
        gx[..., :-1] += 0.75 * g[..., 1:-1:2]
        gx[..., 1:] += 0.25 * g[..., 1:-1:2]
        gx[..., -1] += g[..., -1]
    return np.moveaxis(gx, -1, axis)


def upsample_bilinear2x(x) -> Tensor:
    """Double H and W with align-corners-false bilinear interpolation."""
    xd, xt = _operand(x)
    if xd.ndim != 4:
        raise ShapeError("upsample_bilinear2x expects NCHW")
    h, w = xd.shape[2], xd.shape[3]
    out = _up2_axis(_up2_axis(xd, 2), 3)

    entries = []
    if xt is not None:
        def grad(g, h=h, w=w):
            return _up2_axis_adjoint(_up2_axis_adjoint(g, 3, w), 2, h)
        entries.append((xt, grad))
    return _result("upsample2x", out, entries)


# -- reverse pass --------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every leaf of ``tape``; consumes the tape."""
    if loss.node_id is None or loss.tape is not tape:
        raise TapeError("loss was not produced on this tape")
    if loss.data.shape != ():
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    tape.consumed = True

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones(())
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        node = tape.nodes[nid]
        if g is None or node.backward_fn is None:
            continue
        for pid, pg in node.backward_fn(g):
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
        grads[nid] = None
        node.backward_fn = None

    for nid, node in enumerate(tape.nodes):
        if node.tensor is not None:
            g = grads[nid]
            node.tensor.grad = g if g is not None else np.zeros_like(node.tensor.data)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, the test oracle."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    xf = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = float(f(x))
        xf[i] = orig - h
        fm = float(f(x))
        xf[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g
