"""Reverse-mode differentiation over numpy arrays.

Nodes are evaluated eagerly when built and keep enough of the graph to be
re-evaluated (``forward``) after their sources are edited in place, which is
what the finite-difference checker relies on.  Each primitive is a
``Function`` subclass with a ``forward(ctx, *arrays, **attrs)`` and a
``backward(ctx, grad, *arrays, **attrs)`` returning one gradient (or None)
per input.
"""
import contextlib
import itertools

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""

    def __init__(self, op, msg):
        super().__init__(f"{op}: {msg}")
        self.op = op


class NumericError(FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "fn", "attrs", "ctx", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.parents = ()
        self.fn = None
        self.attrs = None
        self.ctx = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def op(self):
        return self.fn.tag if self.fn is not None else "source"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    tag = "function"

    @staticmethod
    def forward(ctx, *xs, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, g, *xs, **attrs):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs):
        inputs = tuple(as_tensor(x) for x in inputs)
        ctx = {}
        out = Tensor(cls.forward(ctx, *(t.data for t in inputs), **attrs))
        if _GRAD_ENABLED:
            out.requires_grad = any(t.requires_grad for t in inputs)
            out.parents = inputs
            out.fn = cls
            out.attrs = attrs
            out.ctx = ctx
        return out


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward(root):
    """Recompute every interior node from its sources, in topological order."""
    for node in _topo(root):
        if node.fn is None:
            continue
        ctx = {}
        node.data = np.asarray(node.fn.forward(ctx, *(p.data for p in node.parents), **node.attrs))
        node.ctx = ctx
    return root.data


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    Returns a dict mapping those leaf tensors to their (accumulated) gradients.
    """
    if root.data.size != 1:
        raise ShapeError("backward", f"root must be scalar, got shape {root.shape}")
    order = _topo(root)
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.fn is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[id(node)] = node
            continue
        node.ctx["needs"] = tuple(p.requires_grad for p in node.parents)
        pgrads = node.fn.backward(node.ctx, g, *(p.data for p in node.parents), **node.attrs)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise ShapeError(node.op, f"gradient shape {pg.shape} != input shape {p.data.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {leaf: leaf.grad for leaf in leaves.values()}


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(tag, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(tag, f"cannot broadcast {a.shape} with {b.shape}") from None


class Add(Function):
    tag = "add"

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, g, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Function):
    tag = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("sub", a, b)
        return a - b

    @staticmethod
    def backward(ctx, g, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Function):
    tag = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("mul", a, b)
        return a * b

    @staticmethod
    def backward(ctx, g, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Function):
    tag = "div"

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("div", a, b)
        return a / b

    @staticmethod
    def backward(ctx, g, a, b):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class Neg(Function):
    tag = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g, a):
        return (-g,)


class Exp(Function):
    tag = "exp"

    @staticmethod
    def forward(ctx, a):
        ctx["out"] = np.exp(a)
        return ctx["out"]

    @staticmethod
    def backward(ctx, g, a):
        return (g * ctx["out"],)


class Log(Function):
    tag = "log"

    @staticmethod
    def forward(ctx, a):
        return np.log(a)

    @staticmethod
    def backward(ctx, g, a):
        return (g / a,)


class Tanh(Function):
    tag = "tanh"

    @staticmethod
    def forward(ctx, a):
        ctx["out"] = np.tanh(a)
        return ctx["out"]

    @staticmethod
    def backward(ctx, g, a):
        y = ctx["out"]
        return (g * (1 - y * y),)


class Sigmoid(Function):
    tag = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        ctx["out"] = 1 / (1 + np.exp(-a))
        return ctx["out"]

    @staticmethod
    def backward(ctx, g, a):
        y = ctx["out"]
        return (g * y * (1 - y),)


class Relu(Function):
    tag = "relu"

    @staticmethod
    def forward(ctx, a):
        return np.maximum(a, 0)

    @staticmethod
    def backward(ctx, g, a):
        return (g * (a > 0),)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def tanh(a):
    return Tanh.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def relu(a):
    return Relu.apply(a)


# --------------------------------------------------------------------------
# linear algebra, reductions, shape ops
# --------------------------------------------------------------------------

class MatMul(Function):
    tag = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    @staticmethod
    def backward(ctx, g, a, b):
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # fold leading dims into one GEMM
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def matmul(a, b):
    return MatMul.apply(a, b)


class Einsum(Function):
    """Two-operand einsum; every input index must appear in the other operand or the output."""

    tag = "einsum"

    @staticmethod
    def forward(ctx, a, b, spec):
        ins, out = spec.split("->")
        sa, sb = ins.split(",")
        for s, arr in ((sa, a), (sb, b)):
            if len(s) != arr.ndim:
                raise ShapeError("einsum", f"operand rank {arr.ndim} does not match '{s}'")
        sizes = {}
        for s, arr in ((sa, a), (sb, b)):
            for ch, n in zip(s, arr.shape):
                if sizes.setdefault(ch, n) != n:
                    raise ShapeError("einsum", f"index '{ch}' has sizes {sizes[ch]} and {n}")
        return np.einsum(spec, a, b, optimize=True)

    @staticmethod
    def backward(ctx, g, a, b, spec):
        ins, out = spec.split("->")
        sa, sb = ins.split(",")
        ga = np.einsum(f"{out},{sb}->{sa}", g, b, optimize=True)
        gb = np.einsum(f"{out},{sa}->{sb}", g, a, optimize=True)
        return ga, gb


def einsum(spec, a, b):
    spec = spec.replace(" ", "")
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb + out), (sb, sa + out)):
        if any(ch not in other for ch in s):
            raise ValueError(f"einsum '{spec}': index private to one operand is not supported")
    return Einsum.apply(a, b, spec=spec)


class Sum(Function):
    tag = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g, a, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


def sum_(a, axis=None, keepdims=False):
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), np.asarray(1.0 / n, dtype=a.data.dtype))


class Reshape(Function):
    tag = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g, a, shape):
        return (g.reshape(a.shape),)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


class Transpose(Function):
    tag = "transpose"

    @staticmethod
    def forward(ctx, a, axes):
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g, a, axes):
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)


def transpose(a, axes=None):
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


class GetItem(Function):
    tag = "getitem"

    @staticmethod
    def forward(ctx, a, index):
        return a[index]

    @staticmethod
    def backward(ctx, g, a, index):
        out = np.zeros_like(a)
        np.add.at(out, index, g)
        return (out,)


def getitem(a, index):
    return GetItem.apply(a, index=index)


class Concat(Function):
    tag = "concat"

    @staticmethod
    def forward(ctx, *xs, axis=-1):
        ref = xs[0]
        ax = axis % ref.ndim
        for x in xs[1:]:
            if x.ndim != ref.ndim or any(
                    x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
                raise ShapeError("concat", f"shapes {ref.shape} and {x.shape} differ off axis {axis}")
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, g, *xs, axis=-1):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


def concat(xs, axis=-1):
    return Concat.apply(*xs, axis=axis)


class TakeAlong(Function):
    """Gather ``a`` along ``axis`` with an integer index array of broadcastable shape."""

    tag = "take_along"

    @staticmethod
    def forward(ctx, a, index, axis):
        return np.take_along_axis(a, index, axis=axis)

    @staticmethod
    def backward(ctx, g, a, index, axis):
        out = np.zeros_like(a)
        idx = np.broadcast_to(index, g.shape)
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis] = idx
        np.add.at(out, tuple(grids), g)
        return (out,)


def take_along(a, index, axis):
    return TakeAlong.apply(a, index=np.asarray(index), axis=axis)


# --------------------------------------------------------------------------
# softmax family
# --------------------------------------------------------------------------

class Softmax(Function):
    tag = "softmax"

    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        ctx["out"] = e / e.sum(axis=axis, keepdims=True)
        return ctx["out"]

    @staticmethod
    def backward(ctx, g, a, axis=-1):
        y = ctx["out"]
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    tag = "log_softmax"

    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g, a, axis=-1):
        p = np.exp(ctx["out"])
        return (g - p * g.sum(axis=axis, keepdims=True),)


def softmax(a, axis=-1):
    return Softmax.apply(a, axis=axis)


def log_softmax(a, axis=-1):
    return LogSoftmax.apply(a, axis=axis)


# --------------------------------------------------------------------------
# convolution (channels-last, any number of spatial dims)
# --------------------------------------------------------------------------

def _im2col(xp, kernel, stride):
    nd = len(kernel)
    axes = tuple(range(1, nd + 1))
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=axes)
    # win: (N, *full_out, C, *kernel)
    sl = (slice(None),) + tuple(slice(None, None, s) for s in stride)
    win = win[sl]
    out_sp = win.shape[1:1 + nd]
    perm = (0,) + tuple(range(1, nd + 1)) + tuple(range(nd + 2, 2 * nd + 2)) + (nd + 1,)
    cols = np.ascontiguousarray(np.transpose(win, perm))
    n = xp.shape[0]
    return cols.reshape(n * int(np.prod(out_sp)), -1), out_sp


class ConvNd(Function):
    """x: (N, *spatial, C_in); w: (*kernel, C_in, C_out); b: (C_out,)."""

    tag = "conv"

    @staticmethod
    def forward(ctx, x, w, b, stride, padding):
        nd = w.ndim - 2
        kernel = w.shape[:nd]
        if x.ndim != nd + 2 or x.shape[-1] != w.shape[-2]:
            raise ShapeError(f"conv{nd}d", f"input {x.shape} incompatible with weight {w.shape}")
        pads = [(0, 0)] + [tuple(p) for p in padding] + [(0, 0)]
        xp = np.pad(x, pads) if any(p != (0, 0) for p in pads) else x
        for i in range(nd):
            if xp.shape[1 + i] < kernel[i]:
                raise ShapeError(f"conv{nd}d", f"spatial dim {i} ({xp.shape[1 + i]}) smaller than kernel {kernel[i]}")
        cols, out_sp = _im2col(xp, kernel, stride)
        w2 = w.reshape(-1, w.shape[-1])
        out = cols @ w2 + b
        ctx["cols"] = cols
        ctx["xp_shape"] = xp.shape
        ctx["out_sp"] = out_sp
        return out.reshape((x.shape[0],) + tuple(out_sp) + (w.shape[-1],))

    @staticmethod
    def backward(ctx, g, x, w, b, stride, padding):
        nd = w.ndim - 2
        kernel = w.shape[:nd]
        cols = ctx["cols"]
        g2 = g.reshape(-1, g.shape[-1])
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        if not ctx.get("needs", (True,))[0]:
            return None, gw, gb
        dcols = (g2 @ w.reshape(-1, w.shape[-1]).T)
        out_sp = ctx["out_sp"]
        n = x.shape[0]
        dxp = np.zeros(ctx["xp_shape"], dtype=x.dtype)
        if nd == 3:
            kernels.col2im3d(dcols, (n,) + tuple(out_sp), kernel, stride, dxp)
        else:
            dcols = dcols.reshape((n,) + tuple(out_sp) + tuple(kernel) + (x.shape[-1],))
            for offs in itertools.product(*(range(k) for k in kernel)):
                sl = (slice(None),) + tuple(
                    slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offs, stride, out_sp))
                dxp[sl] += dcols[(slice(None),) * (nd + 1) + offs]
        sl = (slice(None),) + tuple(slice(p[0], dxp.shape[1 + i] - p[1]) for i, p in enumerate(padding))
        return dxp[sl], gw, gb


def conv(x, w, b, stride=None, padding="same"):
    """Channels-last N-d convolution (cross-correlation).

    ``padding`` is "same" (symmetric, exact for odd kernels at stride 1),
    "valid", or an explicit list of (before, after) pairs per spatial dim.
    """
    w = as_tensor(w)
    nd = w.ndim - 2
    kernel = w.shape[:nd]
    stride = tuple(stride) if stride is not None else (1,) * nd
    if padding == "same":
        padding = tuple((k // 2, k - 1 - k // 2) for k in kernel)
    elif padding == "valid":
        padding = tuple((0, 0) for _ in kernel)
    else:
        padding = tuple(tuple(p) for p in padding)
    return ConvNd.apply(x, w, b, stride=stride, padding=padding)


# --------------------------------------------------------------------------
# normalization and recurrence
# --------------------------------------------------------------------------

class LayerNorm(Function):
    tag = "layer_norm"

    @staticmethod
    def forward(ctx, x, gain, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx["xhat"] = xhat
        ctx["inv"] = inv
        return xhat * gain + bias

    @staticmethod
    def backward(ctx, g, x, gain, bias, eps=1e-5):
        xhat, inv = ctx["xhat"], ctx["inv"]
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gain
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias


def layer_norm(x, gain, bias, eps=1e-5):
    return LayerNorm.apply(x, gain, bias, eps=eps)


class LSTMSeq(Function):
    """Unidirectional LSTM from zero state.

    gx: (B, T, 4H) input pre-activations (x @ W_ih + b); whh: (H, 4H).
    Returns hidden states (B, T, H).
    """

    tag = "lstm"

    @staticmethod
    def forward(ctx, gx, whh):
        if gx.ndim != 3 or gx.shape[-1] != whh.shape[1] or whh.shape[1] != 4 * whh.shape[0]:
            raise ShapeError("lstm", f"pre-activations {gx.shape} incompatible with recurrent weight {whh.shape}")
        hs, cs, acts = kernels.lstm_forward(np.transpose(gx, (1, 0, 2)), whh)
        ctx["saved"] = (hs, cs, acts)
        return np.transpose(hs, (1, 0, 2))

    @staticmethod
    def backward(ctx, g, gx, whh):
        hs, cs, acts = ctx["saved"]
        dgx, dwhh = kernels.lstm_backward(np.transpose(g, (1, 0, 2)), hs, cs, acts, whh)
        return np.transpose(dgx, (1, 0, 2)).astype(gx.dtype, copy=False), dwhh.astype(whh.dtype, copy=False)


def lstm(gx, whh):
    return LSTMSeq.apply(gx, whh)


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------

def check_gradient(f, point, fd_step=1e-4, analytic=None):
    """Max relative error between an analytic gradient and central differences.

    ``f`` maps an array to a scalar.  When ``analytic`` is None the gradient is
    obtained by building ``f`` on a Tensor and running ``backward``.
    """
    point = np.array(point, dtype=np.float64)

    def scalar(x):
        val = f(x)
        val = float(val.data if isinstance(val, Tensor) else np.asarray(val))
        if not np.isfinite(val):
            raise NumericError(f"function value is not finite at perturbed point ({val})")
        return val

    if analytic is None:
        x = Tensor(point.copy(), requires_grad=True)
        out = f(x)
        if not isinstance(out, Tensor):
            raise TypeError("f must return a Tensor when no analytic gradient is given")
        if not np.isfinite(out.data).all():
            raise NumericError("function value is not finite")
        backward(out)
        analytic = x.grad if x.grad is not None else np.zeros_like(point)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(point.shape)

    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + fd_step
        fp = scalar(point)
        flat[i] = orig - fd_step
        fm = scalar(point)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * fd_step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
