"""Layers with hand-written backward passes.

Activations are NHWC internally. The frequency axis (H) is zero padded and
the time axis (W) is padded circularly, so every layer treats a segment as
one period of a stationary sound; time-tiling an input leaves the pooled
features unchanged.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
"""

from __future__ import annotations

import numpy as np

RELU6_CAP = 6.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def children(self):
        return []

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)
        for c in self.children():
            c.zero_grad()

    def named_tensors(self, prefix=""):
        """Yield (name, owner, key, kind) for parameters and buffers, depth first."""
        for k in self.params:
            yield prefix + k, self, k, "param"
        for k in self.buffers:
            yield prefix + k, self, k, "buffer"
        for i, c in enumerate(self.children()):
            yield from c.named_tensors(f"{prefix}{i}.")

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        for c in self.children():
            c.astype(dtype)
        return self


def pad_hw(x, ph, pw):
    if ph:
        x = np.pad(x, ((0, 0), (ph, ph), (0, 0), (0, 0)))
    if pw:
        x = np.concatenate([x[:, :, -pw:], x, x[:, :, :pw]], axis=2)
    return x


def unpad_hw(g, ph, pw):
    if pw:
        inner = g[:, :, pw:-pw].copy()
        inner[:, :, -pw:] += g[:, :, :pw]
        inner[:, :, :pw] += g[:, :, -pw:]
        g = inner
    if ph:
        g = g[:, ph:-ph]
    return g


def out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


class Conv2d(Layer):
    """Dense 2-D convolution without bias (always followed by batch norm)."""

    def __init__(self, cin, cout, kernel=3, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.kh, self.kw, self.stride = kh, kw, stride
        self.ph, self.pw = (kh - 1) // 2, (kw - 1) // 2
        fan_in = cin * kh * kw
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.standard_normal((cout, cin, kh, kw)) * np.sqrt(2.0 / fan_in)
        self.params["weight"] = w.astype(dtype)

    def forward(self, x, train=False, rng=None):
        w = self.params["weight"]
        cout = w.shape[0]
        if self.kh == 1 and self.kw == 1 and self.stride == 1:
            self._x = x
            return x @ w.reshape(cout, -1).T
        s = self.stride
        xp = pad_hw(x, self.ph, self.pw)
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))
        win = win[:, ::s, ::s]  # B, Ho, Wo, C, kh, kw
        B, Ho, Wo = win.shape[:3]
        cols = win.reshape(B, Ho, Wo, -1)
        self._cols, self._xp_shape = cols, xp.shape
        return cols @ w.reshape(cout, -1).T

    def backward(self, g):
        w = self.params["weight"]
        cout, cin = w.shape[:2]
        wm = w.reshape(cout, -1)
        if self.kh == 1 and self.kw == 1 and self.stride == 1:
            x = self._x
            self.grads["weight"] += (g.reshape(-1, cout).T @ x.reshape(-1, cin)).reshape(w.shape)
            return g @ wm
        cols = self._cols
        self.grads["weight"] += (g.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        dcols = (g @ wm).reshape(*g.shape[:3], cin, self.kh, self.kw)
        dxp = np.zeros(self._xp_shape, dtype=g.dtype)
        s = self.stride
        Ho, Wo = g.shape[1:3]
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[..., i, j]
        return unpad_hw(dxp, self.ph, self.pw)


class DepthwiseConv2d(Layer):
    """Per-channel convolution. ``padding=False`` gives a valid convolution."""

    def __init__(self, channels, kernel=3, stride=1, padding=True, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.kh, self.kw, self.stride = kh, kw, stride
        self.ph, self.pw = ((kh - 1) // 2, (kw - 1) // 2) if padding else (0, 0)
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.standard_normal((channels, 1, kh, kw)) * np.sqrt(2.0 / (kh * kw))
        self.params["weight"] = w.astype(dtype)

    def forward(self, x, train=False, rng=None):
        w = self.params["weight"][:, 0]
        s = self.stride
        xp = pad_hw(x, self.ph, self.pw)
        Ho = (xp.shape[1] - self.kh) // s + 1
        Wo = (xp.shape[2] - self.kw) // s + 1
        y = np.zeros((x.shape[0], Ho, Wo, x.shape[3]), dtype=x.dtype)
        for i in range(self.kh):
            for j in range(self.kw):
                y += xp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] * w[:, i, j]
        self._xp = xp
        return y

    def backward(self, g):
        w = self.params["weight"][:, 0]
        xp, s = self._xp, self.stride
        Ho, Wo = g.shape[1:3]
        dxp = np.zeros_like(xp)
        dw = np.zeros(w.shape, dtype=np.float64)
        for i in range(self.kh):
            for j in range(self.kw):
                sl = (slice(None), slice(i, i + s * (Ho - 1) + 1, s), slice(j, j + s * (Wo - 1) + 1, s))
                dw[:, i, j] = np.einsum("bhwc,bhwc->c", g, xp[sl], dtype=np.float64)
                dxp[sl] += g * w[:, i, j]
        self.grads["weight"] += dw[:, None].astype(w.dtype)
        return unpad_hw(dxp, self.ph, self.pw)


class BatchNorm(Layer):
    """Batch normalisation over every axis but the last (channels)."""

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def forward(self, x, train=False, rng=None):
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            mean = x.mean(axis=axes, dtype=np.float64)
            var = x.var(axis=axes, dtype=np.float64)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            n = x.size // x.shape[-1]
            unbiased = var * n / max(n - 1, 1)
            self.buffers["running_mean"] = ((1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean).astype(rm.dtype)
            self.buffers["running_var"] = ((1 - BN_MOMENTUM) * rv + BN_MOMENTUM * unbiased).astype(rv.dtype)
        else:
            mean = self.buffers["running_mean"].astype(np.float64)
            var = self.buffers["running_var"].astype(np.float64)
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)) * inv
        self._xhat, self._inv, self._axes = xhat, inv, axes
        return xhat * gamma + beta

    def backward(self, g):
        xhat, axes = self._xhat, self._axes
        gamma = self.params["gamma"]
        c = g.shape[-1]
        dgamma = np.einsum("nc,nc->c", g.reshape(-1, c), xhat.reshape(-1, c), dtype=np.float64)
        dbeta = g.sum(axis=axes, dtype=np.float64)
        self.grads["gamma"] += dgamma.astype(gamma.dtype)
        self.grads["beta"] += dbeta.astype(gamma.dtype)
        n = g.size // g.shape[-1]
        dxhat = g * gamma
        # standard train-mode batch-norm gradient
        dx = (dxhat - (dbeta * gamma / n).astype(g.dtype)
              - xhat * (dgamma * gamma / n).astype(g.dtype)) * self._inv
        return dx


class ReLU6(Layer):
    def forward(self, x, train=False, rng=None):
        self._mask = (x > 0) & (x < RELU6_CAP)
        return np.clip(x, 0, RELU6_CAP)

    def backward(self, g):
        return g * self._mask


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, g):
        return g * self._mask


class GlobalAvgPool(Layer):
    """Mean over H and W, accumulated in float64: [B, H, W, C] -> [B, C]."""

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)

    def backward(self, g):
        B, H, W, C = self._shape
        return np.broadcast_to(g[:, None, None, :] / (H * W), self._shape).copy()


class Dense(Layer):
    def __init__(self, fan_in, fan_out, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        self.params["weight"] = w.astype(dtype)
        self.params["bias"] = np.zeros(fan_out, dtype)

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, g):
        self.grads["weight"] += g.T @ self._x
        self.grads["bias"] += g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return g @ self.params["weight"]


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs a random generator")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, g):
        return g if self._mask is None else g * self._mask


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def conv_bn(cin, cout, kernel, stride, rng, act=True, dtype=np.float32):
    layers = [Conv2d(cin, cout, kernel, stride, rng, dtype), BatchNorm(cout, dtype)]
    if act:
        layers.append(ReLU6())
    return Sequential(*layers)


class InvertedResidual(Layer):
    """Expand (1x1) -> depthwise 3x3 -> linear projection (1x1), with skip at stride 1."""

    def __init__(self, cin, cout, stride, expansion, rng=None, dtype=np.float32):
        super().__init__()
        hidden = cin * expansion
        parts = []
        if expansion != 1:
            parts.append(conv_bn(cin, hidden, 1, 1, rng, dtype=dtype))
        parts.append(Sequential(DepthwiseConv2d(hidden, 3, stride, rng=rng, dtype=dtype),
                                BatchNorm(hidden, dtype), ReLU6()))
        parts.append(conv_bn(hidden, cout, 1, 1, rng, act=False, dtype=dtype))
        self.body = Sequential(*parts)
        self.residual = stride == 1 and cin == cout

    def children(self):
        return [self.body]

    def forward(self, x, train=False, rng=None):
        y = self.body.forward(x, train, rng)
        return x + y if self.residual else y

    def backward(self, g):
        gx = self.body.backward(g)
        return gx + g if self.residual else gx


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy against soft targets and its gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    n = len(z)
    loss = -np.sum(targets * logp) / n
    grad = (np.exp(logp) - targets) / n
    return float(loss), grad.astype(np.asarray(logits).dtype)
