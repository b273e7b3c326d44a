"""Dense NCHW tensors with hand-written reverse-mode gradients.

Every kernel computes its forward result with numpy and registers a closure
that maps the output gradient to gradients of its inputs. Graph nodes are only
recorded when at least one input requires a gradient and recording is enabled,
so inference (coding) paths build no graph at all.

Single precision is the default; pass float64 arrays (see ``Module.astype``)
for the finite-difference verification harness.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .errors import DimensionError, IntegrityError

_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A named leaf tensor whose gradient is accumulated during backward."""

    __slots__ = ("name",)

    def __init__(self, name, value):
        super().__init__(np.asarray(value), requires_grad=True)
        self.name = name

    @property
    def value(self):
        return self.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _make(op, data, parents, backward):
    if not np.all(np.isfinite(data)):
        raise IntegrityError(f"non-finite output from {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _scalar_like(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = as_tensor(a)
    b = _scalar_like(b, a)
    a = _scalar_like(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a = as_tensor(a)
    b = _scalar_like(b, a)
    a = _scalar_like(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    b = _scalar_like(b, a)
    a = _scalar_like(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b):
    a = as_tensor(a)
    b = _scalar_like(b, a)
    a = _scalar_like(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), backward)


def square(x):
    def backward(g):
        return (2.0 * g * x.data,)

    return _make("square", x.data * x.data, (x,), backward)


def absolute(x):
    def backward(g):
        return (g * np.sign(x.data),)

    return _make("abs", np.abs(x.data), (x,), backward)


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make("exp", out, (x,), backward)


def log(x):
    def backward(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), backward)


def clamp_min(x, lo):
    """max(x, lo); the gradient is zero where the floor is active."""
    out = np.maximum(x.data, np.asarray(lo, dtype=x.dtype))

    def backward(g):
        return (g * (x.data >= lo),)

    return _make("clamp_min", out, (x,), backward)


def clamp(x, lo, hi):
    out = np.clip(x.data, lo, hi)

    def backward(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _make("clamp", out, (x,), backward)


def ste_round(x):
    """Round half away from zero; gradient passes straight through."""
    return _make("ste_round", round_half_away(x.data), (x,), lambda g: (g,))


def round_half_away(a):
    a = np.asarray(a)
    whole = np.trunc(a)
    # a - trunc(a) is exact, so ties and near-ties are decided without rounding error
    bump = (np.abs(a - whole) >= 0.5).astype(a.dtype)
    return whole + np.copysign(bump, a)


# --------------------------------------------------------------------------
# activations


def gelu(x):
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make("gelu", out.astype(v.dtype, copy=False), (x,), backward)


def sigmoid(x):
    out = _sigmoid_np(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), backward)


def _sigmoid_np(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (x,), backward)


def softplus(x):
    out = np.logaddexp(np.zeros((), dtype=x.dtype), x.data)

    def backward(g):
        return (g * _sigmoid_np(x.data),)

    return _make("softplus", out, (x,), backward)


def normal_cdf(x):
    """Standard normal CDF."""
    out = ndtr(x.data).astype(x.dtype, copy=False)

    def backward(g):
        return (g * (_INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)),)

    return _make("normal_cdf", out, (x,), backward)


def softmax_lastdim(x):
    """Softmax over the last axis with max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), backward)


# --------------------------------------------------------------------------
# shape and reductions


def reshape(x, shape):
    def backward(g):
        return (g.reshape(x.shape),)

    return _make("reshape", x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make("transpose", x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def channel_slice(x, start, stop):
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make("channel_slice", x.data[:, start:stop], (x,), backward)


def sum_all(x):
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make("sum", np.asarray(x.data.sum(dtype=x.dtype)), (x,), backward)


def mean_all(x):
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _make("mean", np.asarray(x.data.mean(dtype=x.dtype)), (x,), backward)


def channel_mean(x):
    """Mean over the channel axis of an NCHW tensor, keeping it as size 1."""
    c = x.shape[1]

    def backward(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    return _make("channel_mean", x.data.mean(axis=1, keepdims=True), (x,), backward)


def channel_max(x):
    """Max over the channel axis; the gradient goes to the first maximal channel."""
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g, axis=1)
        return (full,)

    return _make("channel_max", out, (x,), backward)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


# --------------------------------------------------------------------------
# linear maps and convolutions


def linear(x, weight, bias=None):
    """Row-wise affine map ``x @ weight + bias`` for ``x`` of shape (rows, C_in)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make("linear", out, parents, backward)


def to_rows(x):
    """View an NCHW tensor as (B*H*W, C) rows."""
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b * h * w, c))


def from_rows(r, batch, height, width):
    return transpose(reshape(r, (batch, height, width, r.shape[1])), (0, 3, 1, 2))


def channel_linear(x, weight, bias=None):
    """Apply ``linear`` independently at every spatial position of an NCHW tensor."""
    b, _, h, w = x.shape
    return from_rows(linear(to_rows(x), weight, bias), b, h, w)


def _windows(xp, k, stride, ho, wo):
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _check_conv(x, weight, in_axis):
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv kernel must be square, got weight {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise DimensionError(f"conv channel mismatch: input {x.shape} vs weight {weight.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation; weight is (C_out, C_in, k, k)."""
    x = as_tensor(x)
    _check_conv(x, weight, 1)
    b, c, h, w = x.shape
    co, _, k, _ = weight.shape
    s, p = stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for weight {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(xp, k, s, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = weight.data.reshape(co, c * k * k)
    rows = cols @ wmat.T
    if bias is not None:
        rows += bias.data
    out = np.ascontiguousarray(rows.reshape(b, ho, wo, co).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grows = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
        gw = (grows.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (grows @ wmat).reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[..., i, j]
            gx = gxp[:, :, p : p + h, p : p + w]
        if bias is None:
            return gx, gw
        return gx, gw, grows.sum(axis=0)

    return _make("conv2d", out, parents, backward)


def conv2d_transpose(x, weight, bias=None, stride=1, padding=0):
    """Adjoint of ``conv2d``; weight is (C_in, C_out, k, k) with C_in the channels of ``x``."""
    x = as_tensor(x)
    _check_conv(x, weight, 0)
    b, c, h, w = x.shape
    _, co, k, _ = weight.shape
    s, p = stride, padding
    if s < 1:
        raise DimensionError(f"conv2d_transpose: stride must be >= 1, got {s}")
    hf, wf = (h - 1) * s + k, (w - 1) * s + k
    if hf - 2 * p < 1 or wf - 2 * p < 1:
        raise DimensionError(f"conv2d_transpose: padding {p} removes the whole output")
    rows = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    wmat = weight.data.reshape(c, co * k * k)
    cols = (rows @ wmat).reshape(b, h, w, co, k, k).transpose(0, 3, 1, 2, 4, 5)
    full = np.zeros((b, co, hf, wf), dtype=np.result_type(x.data, weight.data))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + s * (h - 1) + 1 : s, j : j + s * (w - 1) + 1 : s] += cols[..., i, j]
    out = full[:, :, p : hf - p, p : wf - p]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _windows(gfull, k, s, h, w).transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, co * k * k)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(b, h, w, c).transpose(0, 3, 1, 2)
        gw = (rows.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("conv2d_transpose", out, parents, backward)


def pad_edge(x, p):
    """Pad the two spatial axes by ``p`` pixels, repeating the border values."""
    x = as_tensor(x)
    _, _, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def backward(g):
        g = g.copy()
        # fold the replicated border back onto the edge rows and columns
        g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
        g[:, :, p + h - 1, :] += g[:, :, p + h :, :].sum(axis=2)
        g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
        g[:, :, :, p + w - 1] += g[:, :, :, p + w :].sum(axis=3)
        return (g[:, :, p : p + h, p : p + w],)

    return _make("pad_edge", out, (x,), backward)


def dwconv3x3(x, weight, bias=None):
    """Depthwise 3x3 convolution, stride 1, padding 1; weight is (C, 1, 3, 3)."""
    x = as_tensor(x)
    if x.ndim != 4 or weight.shape != (x.shape[1], 1, 3, 3):
        raise DimensionError(f"dwconv3x3: input {x.shape} incompatible with weight {weight.shape}")
    _, _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    taps = weight.data[:, 0]
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i : i + h, j : j + w] * taps[:, i, j][None, :, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(3):
                for j in range(3):
                    gw[:, 0, i, j] = (g * xp[:, :, i : i + h, j : j + w]).sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + h, j : j + w] += g * taps[:, i, j][None, :, None, None]
            gx = gxp[:, :, 1 : 1 + h, 1 : 1 + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("dwconv3x3", out, parents, backward)


# --------------------------------------------------------------------------
# verification


def grad_check(loss_fn, tensors, step=1e-4, seed=0):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``tensors`` maps names to float64 leaf tensors (parameters, or inputs with
    ``requires_grad=True``). Each tensor is probed along one random direction
    ``d``: the analytic directional derivative ``<grad, d>`` is compared with
    ``(L(t + h d) - L(t - h d)) / 2h``. Returns ``(worst, per_name)`` where the
    error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    for name, t in tensors.items():
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors, {name} is {t.dtype}")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(grad)):
            raise IntegrityError(f"non-finite gradient for {name}")
        direction = rng.standard_normal(t.shape)
        analytic = float(np.sum(grad * direction))
        original = t.data.copy()
        with no_grad():
            t.data = original + step * direction
            up = float(loss_fn().data)
            t.data = original - step * direction
            down = float(loss_fn().data)
        t.data = original
        numeric = (up - down) / (2.0 * step)
        errors[name] = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
    return max(errors.values(), default=0.0), errors
