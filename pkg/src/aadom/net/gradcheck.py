"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    DepthwiseConv2d,
    Dropout,
    GlobalAvgPool,
    InvertedResidual,
    ReLU,
    ReLU6,
    softmax_cross_entropy,
)
from .model import ModelConfig, build_model

STEP = 1e-4

# kind -> (factory(rng, shape), default NHWC / [B, F] input shape)
_KINDS = {
    "conv3x3": (lambda r, s: Conv2d(s[-1], 4, 3, 2, r, np.float64), (2, 6, 5, 3)),
    "conv3x3_s1": (lambda r, s: Conv2d(s[-1], 4, 3, 1, r, np.float64), (2, 5, 4, 3)),
    "conv1x1": (lambda r, s: Conv2d(s[-1], 5, 1, 1, r, np.float64), (2, 4, 3, 6)),
    "depthwise": (lambda r, s: DepthwiseConv2d(s[-1], 3, 2, rng=r, dtype=np.float64), (2, 6, 5, 4)),
    "depthwise_s1": (lambda r, s: DepthwiseConv2d(s[-1], 3, 1, rng=r, dtype=np.float64), (2, 5, 4, 4)),
    "gdconv": (lambda r, s: DepthwiseConv2d(s[-1], (s[1], 1), 1, padding=False, rng=r,
                                            dtype=np.float64), (2, 4, 3, 5)),
    "batchnorm": (lambda r, s: _randomised_bn(r, s[-1]), (4, 3, 2, 5)),
    "relu6": (lambda r, s: ReLU6(), (3, 8)),
    "relu": (lambda r, s: ReLU(), (3, 8)),
    "gap": (lambda r, s: GlobalAvgPool(), (2, 3, 4, 5)),
    "dense": (lambda r, s: Dense(s[-1], 4, r, np.float64), (3, 8)),
    "dropout": (lambda r, s: Dropout(0.3), (3, 8)),
    "bottleneck": (lambda r, s: InvertedResidual(s[-1], s[-1], 1, 2, r, np.float64), (2, 4, 4, 3)),
    "bottleneck_s2": (lambda r, s: InvertedResidual(s[-1], 4, 2, 2, r, np.float64), (2, 4, 4, 3)),
}
LAYER_KINDS = tuple(_KINDS) + ("softmax_ce", "model")


def _randomised_bn(rng, c):
    bn = BatchNorm(c, np.float64)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, c)
    bn.params["beta"] = rng.uniform(-0.5, 0.5, c)
    return bn


def _away_from_kinks(rng, shape):
    # keep ReLU/ReLU6 inputs at least 0.05 from 0 and 6
    x = rng.uniform(-2.0, 8.0, shape)
    for k in (0.0, 6.0):
        near = np.abs(x - k) < 0.05
        x[near] = k + np.where(x[near] >= k, 0.1, -0.1)
    return x


def _max_error(analytic, numeric):
    """Largest discrepancy relative to the tensor's largest gradient magnitude.

    The scale is floored at 1e-6 so gradients that vanish exactly (a shift
    cancelled by a following batch norm) compare in absolute terms.
    """
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-6)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _numeric_grad(f, arr, idx=None):
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in (range(flat.size) if idx is None else idx):
        old = flat[i]
        flat[i] = old + STEP
        up = f()
        flat[i] = old - STEP
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * STEP)
    return grad


def _check_softmax_ce(rng, shape):
    z = rng.standard_normal(shape or (4, 5))
    t = rng.random(z.shape)
    t /= t.sum(axis=1, keepdims=True)
    _, analytic = softmax_cross_entropy(z, t)
    numeric = _numeric_grad(lambda: softmax_cross_entropy(z, t)[0], z)
    return _max_error(analytic, numeric)


def _check_model(rng, shape, n_probe=10):
    """Probe a few entries of every parameter of a tiny float64 network.

    Probes whose forward and backward one-sided differences disagree have
    straddled a ReLU6 kink and are skipped.
    """
    cfg = ModelConfig(num_classes=3, width_mult=0.05, dropout_rate=0.3, input_mels=16)
    model = build_model(cfg, int(rng.integers(1 << 31)))
    model.root.astype(np.float64)
    x = rng.standard_normal(shape or (2, 1, 16, 32))
    t = np.eye(3)[rng.integers(0, 3, len(x))]
    mask_seed = int(rng.integers(1 << 31))

    def loss():
        z = model.logits(x, True, np.random.default_rng(mask_seed))
        return softmax_cross_entropy(z, t)[0]

    model.root.zero_grad()
    _, g = softmax_cross_entropy(model.logits(x, True, np.random.default_rng(mask_seed)), t)
    model.backward(g)
    f0 = loss()
    worst = 0.0
    for _, owner, key in model.parameters():
        p = owner.params[key]
        flat = p.reshape(-1)
        analytic, numeric = [], []
        for i in rng.choice(p.size, size=min(p.size, n_probe), replace=False):
            old = flat[i]
            flat[i] = old + STEP
            up = loss()
            flat[i] = old - STEP
            down = loss()
            flat[i] = old
            fwd, bwd = (up - f0) / STEP, (f0 - down) / STEP
            if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1e-3):
                continue
            analytic.append(owner.grads[key].reshape(-1)[i])
            numeric.append((up - down) / (2 * STEP))
        if analytic:
            worst = max(worst, _max_error(np.array(analytic), np.array(numeric)))
    return worst


def gradient_check(layer_kind: str, shape=None, seed: int = 0) -> float:
    """Compare analytic and central-difference gradients for one layer kind.

    The probe loss is ``sum(R * layer(x))`` with a fixed random ``R``, evaluated
    in float64 with step 1e-4. Returns the worst error over the input gradient
    and every parameter gradient.
    """
    rng = np.random.default_rng(seed)
    if layer_kind == "softmax_ce":
        return _check_softmax_ce(rng, shape)
    if layer_kind == "model":
        return _check_model(rng, shape)
    if layer_kind not in _KINDS:
        raise ValueError(f"unknown layer kind {layer_kind!r}; expected one of {LAYER_KINDS}")
    factory, default_shape = _KINDS[layer_kind]
    shape = tuple(shape or default_shape)
    layer = factory(rng, shape)
    x = _away_from_kinks(rng, shape) if layer_kind in ("relu", "relu6") else rng.standard_normal(shape)
    mask_seed = int(rng.integers(1 << 31))

    def run():
        return layer.forward(x, train=True, rng=np.random.default_rng(mask_seed))

    r = rng.standard_normal(run().shape)
    layer.zero_grad()
    gx = layer.backward(r)

    def loss():
        return float(np.sum(run() * r))

    worst = _max_error(gx, _numeric_grad(loss, x))
    for key, p in layer.params.items():
        analytic = layer.grads[key].copy()
        worst = max(worst, _max_error(analytic, _numeric_grad(loss, p)))
    for child in _descendants(layer):
        for key, p in child.params.items():
            worst = max(worst, _max_error(child.grads[key].copy(), _numeric_grad(loss, p)))
    return worst


def _descendants(layer):
    for c in layer.children():
        yield c
        yield from _descendants(c)
