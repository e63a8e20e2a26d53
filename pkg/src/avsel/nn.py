"""Parameter store and the few layer building blocks the models share."""
from collections import OrderedDict

import numpy as np

from . import autodiff as ad


class ParamStore:
    """Ordered name -> Tensor mapping.  Buffers are stored but never trained."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors = OrderedDict()
        self.buffers = set()

    def add(self, name, value, trainable=True):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = ad.Tensor(np.asarray(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self.tensors[name] = t
        if not trainable:
            self.buffers.add(name)
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self, prefix=""):
        return [n for n in self.tensors if n.startswith(prefix)]

    def trainable(self):
        return OrderedDict((n, t) for n, t in self.tensors.items() if n not in self.buffers)

    def arrays(self):
        return OrderedDict((n, t.data) for n, t in self.tensors.items())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self):
        """Gradients of trainable tensors; missing ones are zero-filled."""
        return OrderedDict(
            (n, t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in self.trainable().items())

    def load(self, arrays, prefix="", strict=True):
        """Copy matching arrays in place.  With ``strict`` every name under ``prefix`` must be present."""
        targets = self.names(prefix)
        missing = [n for n in targets if n not in arrays]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for n in targets:
            if n not in arrays:
                continue
            src = np.asarray(arrays[n])
            if src.shape != self.tensors[n].data.shape:
                raise ValueError(f"shape mismatch for {n!r}: {src.shape} vs {self.tensors[n].data.shape}")
            self.tensors[n].data[...] = src
        return [n for n in targets if n in arrays]

    def num_params(self, prefix=""):
        return int(sum(self.tensors[n].data.size for n in self.names(prefix) if n not in self.buffers))


def uniform_init(rng, shape, fan_in, gain=1.0):
    bound = gain * np.sqrt(3.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, store, name, din, dout, rng, bias=True, gain=1.0):
        self.w = store.add(f"{name}/w", uniform_init(rng, (din, dout), din, gain))
        self.b = store.add(f"{name}/b", np.zeros(dout)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        return y if self.b is None else ad.add(y, self.b)


class Conv:
    """One channels-last convolution; kernel rank picks 1-D/2-D/3-D."""

    def __init__(self, store, name, kernel, cin, cout, rng, stride=None, gain=np.sqrt(2.0)):
        kernel = tuple(kernel)
        fan_in = int(np.prod(kernel)) * cin
        self.stride = tuple(stride) if stride is not None else (1,) * len(kernel)
        self.kernel = kernel
        self.w = store.add(f"{name}/w", uniform_init(rng, kernel + (cin, cout), fan_in, gain))
        self.b = store.add(f"{name}/b", np.zeros(cout))

    def __call__(self, x):
        return ad.conv(x, self.w, self.b, stride=self.stride, padding="same")


class LayerNormParams:
    def __init__(self, store, name, dim):
        self.gain = store.add(f"{name}/gain", np.ones(dim))
        self.bias = store.add(f"{name}/bias", np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class LSTMLayer:
    """Single-direction LSTM; forget-gate bias starts at 1."""

    def __init__(self, store, name, din, hidden, rng):
        self.hidden = hidden
        self.w_ih = store.add(f"{name}/w_ih", uniform_init(rng, (din, 4 * hidden), din))
        self.w_hh = store.add(f"{name}/w_hh", uniform_init(rng, (hidden, 4 * hidden), hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = store.add(f"{name}/b", b)

    def __call__(self, x):
        gx = ad.add(ad.matmul(x, self.w_ih), self.b)
        return ad.lstm(gx, self.w_hh)

    def step(self, x, h, c):
        """One inference step on plain arrays: x (B, D), h/c (B, H)."""
        z = x @ self.w_ih.data + self.b.data + h @ self.w_hh.data
        H = self.hidden
        i = 1 / (1 + np.exp(-z[:, :H]))
        f = 1 / (1 + np.exp(-z[:, H:2 * H]))
        g = np.tanh(z[:, 2 * H:3 * H])
        o = 1 / (1 + np.exp(-z[:, 3 * H:]))
        c = f * c + i * g
        h = o * np.tanh(c)
        return h, c


def reverse_index(lengths, T):
    """(B, T) gather index reversing each row within its valid length; padding maps to itself."""
    lengths = np.asarray(lengths)
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)
