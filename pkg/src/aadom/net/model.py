"""Mobile-FaceNet style classifier over log-mel segments.

Layer plan (t = expansion, c = channels, n = repeats, s = stride)::

    Conv 3x3            c=64   s=2
    Conv 3x3            c=64   s=1
    Bottleneck  t=2     c=128  n=2  s=2
    Bottleneck  t=4     c=128  n=2  s=2
    Bottleneck  t=4     c=128  n=2  s=2
    Conv 1x1            c=512
    Linear GDConv       c=512        (depthwise, kernel spans all remaining mel rows)
    Linear Conv 1x1     c=512
    Global average pool
    Dense 1024 ReLU, Dropout 0.3, Dense C softmax
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InputTooSmall, InvalidConfig, NonFiniteActivation
from .layers import (
    BatchNorm,
    Dense,
    DepthwiseConv2d,
    Dropout,
    GlobalAvgPool,
    InvertedResidual,
    ReLU,
    Sequential,
    conv_bn,
    out_size,
    softmax,
)

BOTTLENECKS = ((2, 128, 2, 2), (4, 128, 2, 2), (4, 128, 2, 2))
MIN_FRAMES = 32
EMBEDDINGS = ("softmax", "penultimate")


@dataclass
class ModelConfig:
    num_classes: int
    width_mult: float = 1.0
    dropout_rate: float = 0.3
    input_mels: int = 128
    embedding: str = "softmax"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidConfig("need at least two classes")
        if not 0 < self.width_mult <= 1:
            raise InvalidConfig("width_mult must lie in (0, 1]")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidConfig("dropout_rate must lie in [0, 1)")
        if self.input_mels < 16:
            raise InvalidConfig("input_mels too small for the stride chain")
        if self.embedding not in EMBEDDINGS:
            raise InvalidConfig(f"embedding must be one of {EMBEDDINGS}")

    def channels(self, c: int) -> int:
        return max(8, math.ceil(c * self.width_mult))


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        c0 = ch(64)
        layers = [conv_bn(1, c0, 3, 2, rng), conv_bn(c0, c0, 3, 1, rng)]
        h = out_size(cfg.input_mels, 3, 2, 1)
        cin = c0
        for t, c, n, s in BOTTLENECKS:
            cout = ch(c)
            for i in range(n):
                stride = s if i == 0 else 1
                layers.append(InvertedResidual(cin, cout, stride, t, rng))
                h = out_size(h, 3, stride, 1)
                cin = cout
        c512 = ch(512)
        layers.append(conv_bn(cin, c512, 1, 1, rng))
        layers.append(Sequential(DepthwiseConv2d(c512, (h, 1), 1, padding=False, rng=rng),
                                 BatchNorm(c512)))
        layers.append(conv_bn(c512, c512, 1, 1, rng, act=False))
        layers.append(GlobalAvgPool())
        self.features = Sequential(*layers)
        hidden = ch(1024)
        self.hidden = Sequential(Dense(c512, hidden, rng), ReLU())
        self.dropout = Dropout(cfg.dropout_rate)
        self.classifier = Dense(hidden, cfg.num_classes, rng)
        self.root = Sequential(self.features, self.hidden, self.dropout, self.classifier)
        self.adam_step = 0
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}

    # -- parameters --------------------------------------------------------
    def tensors(self):
        return list(self.root.named_tensors())

    def parameters(self):
        return [(n, o, k) for n, o, k, kind in self.tensors() if kind == "param"]

    def state(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer by name (live references)."""
        return {n: (o.params if kind == "param" else o.buffers)[k]
                for n, o, k, kind in self.tensors()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, o, k, kind in self.tensors():
            store = o.params if kind == "param" else o.buffers
            if n not in state or state[n].shape != store[k].shape:
                raise KeyError(n)
            store[k] = np.array(state[n], dtype=store[k].dtype)

    @property
    def dtype(self):
        return self.classifier.params["weight"].dtype

    def n_params(self) -> int:
        return sum(o.params[k].size for _, o, k in self.parameters())

    # -- computation -------------------------------------------------------
    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.input_mels:
            raise InputTooSmall(
                f"expected input [B, 1, {self.cfg.input_mels}, T], got {list(x.shape)}")
        if x.shape[3] < MIN_FRAMES:
            raise InputTooSmall(f"{x.shape[3]} frames; the stride chain needs >= {MIN_FRAMES}")
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # NCHW -> NHWC

    def logits(self, x, train=False, rng=None):
        z = self.root.forward(self._check_input(x), train, rng)
        if not np.all(np.isfinite(z)):
            raise NonFiniteActivation("non-finite logits")
        return z

    def backward(self, grad_logits):
        self.root.backward(grad_logits)

    def forward(self, x, train=False, rng=None):
        """Softmax class probabilities, float64 [B, C]."""
        return softmax(self.logits(x, train, rng))

    def penultimate(self, x):
        h = self.hidden.forward(self.features.forward(self._check_input(x)))
        return h.astype(np.float64)

    def embed(self, x, batch_size: int = 64):
        """Eval-mode embeddings for a stack of spectrograms [N, 1, M, T]."""
        out = []
        for i in range(0, len(x), batch_size):
            chunk = x[i:i + batch_size]
            out.append(self.forward(chunk) if self.cfg.embedding == "softmax"
                       else self.penultimate(chunk))
        return np.concatenate(out) if out else np.zeros((0, self.embedding_dim))

    @property
    def embedding_dim(self) -> int:
        if self.cfg.embedding == "softmax":
            return self.cfg.num_classes
        return self.cfg.channels(1024)

    def config_dict(self) -> dict:
        return {"model": asdict(self.cfg), "seed": self.seed, "adam_step": self.adam_step}


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """He-normal weights, zero biases; deterministic in ``seed``."""
    return Model(cfg, seed)
