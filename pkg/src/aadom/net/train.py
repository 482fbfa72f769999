"""Adam training loop with online SpecAugment / Mixup."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..augment import AugmentConfig, LabeledBatch, mixup, spec_augment
from ..errors import DivergedLoss, EmptyDataset, NonFiniteActivation
from .layers import softmax_cross_entropy
from .model import Model

logger = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)  # (epoch, loss, accuracy)

    def append(self, epoch, loss, acc):
        self.epochs.append((epoch, loss, acc))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,loss,accuracy\n")
        for e, loss, acc in self.epochs:
            buf.write(f"{e},{loss!r},{acc!r}\n")
        return buf.getvalue()

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1][2] if self.epochs else float("nan")


def adam_step(model: Model, lr: float) -> None:
    model.adam_step += 1
    t = model.adam_step
    c1, c2 = 1 - BETA1 ** t, 1 - BETA2 ** t
    for name, owner, key in model.parameters():
        g = owner.grads[key]
        m = model.adam_m.get(name)
        if m is None:
            m = model.adam_m[name] = np.zeros_like(g)
            model.adam_v[name] = np.zeros_like(g)
        v = model.adam_v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        owner.params[key] = owner.params[key] - step.astype(owner.params[key].dtype)


def _snapshot(model: Model):
    return ({k: v.copy() for k, v in model.state().items()},
            {k: v.copy() for k, v in model.adam_m.items()},
            {k: v.copy() for k, v in model.adam_v.items()},
            model.adam_step)


def _restore(model: Model, snap) -> None:
    state, m, v, step = snap
    model.load_state(state)
    model.adam_m, model.adam_v, model.adam_step = m, v, step


def prepare_batch(x, y, rng, aug: AugmentConfig | None, use_specaug: bool, use_mixup: bool):
    if use_specaug:
        x = np.stack([spec_augment(s, rng, aug.specaug_time_width, aug.specaug_freq_width)
                      for s in x])
    if use_mixup and len(x) >= 2:
        mixed = mixup(LabeledBatch(x, y), rng, aug.mixup_beta_alpha, aug.mixup_uniform_prob)
        x, y = mixed.specs, mixed.labels
    return x, y


def train(model: Model, data: LabeledBatch, epochs: int, lr: float = 1e-4,
          batch_size: int = 32, seed: int = 0, augment: AugmentConfig | None = None,
          use_specaug: bool = False, use_mixup: bool = False, first_epoch: int = 1,
          on_epoch_end: Callable[[int, Model], None] | None = None) -> TrainingLog:
    """Minimise soft-label cross-entropy with Adam.

    Shuffling, augmentation and dropout draw from generators seeded by
    (seed, epoch[, batch]), so a run is bit-reproducible. If the loss turns
    non-finite the model is rolled back to the start of the failing epoch and
    DivergedLoss is raised.
    """
    if len(data) == 0:
        raise EmptyDataset("no training examples")
    n_classes = len(np.unique(data.labels.argmax(axis=1)))
    if n_classes < 2:
        raise EmptyDataset("training data covers fewer than two classes")
    aug = augment or AugmentConfig()
    x_all = np.asarray(data.specs, dtype=np.float32)
    y_all = data.labels
    log = TrainingLog()
    for epoch in range(first_epoch, first_epoch + epochs):
        snap = _snapshot(model)
        order = np.random.default_rng([seed, epoch]).permutation(len(x_all))
        total_loss, correct = 0.0, 0
        try:
            for b, start in enumerate(range(0, len(order), batch_size)):
                idx = order[start:start + batch_size]
                rng = np.random.default_rng([seed, epoch, b])
                x, y = prepare_batch(x_all[idx], y_all[idx], rng, aug, use_specaug, use_mixup)
                model.root.zero_grad()
                z = model.logits(x[:, None], train=True, rng=rng)
                loss, grad = softmax_cross_entropy(z, y)
                if not np.isfinite(loss):
                    raise DivergedLoss(f"loss became {loss} in epoch {epoch}")
                model.backward(grad)
                adam_step(model, lr)
                total_loss += loss * len(idx)
                correct += int(np.sum(z.argmax(axis=1) == y.argmax(axis=1)))
        except (DivergedLoss, NonFiniteActivation, FloatingPointError) as exc:
            _restore(model, snap)
            raise DivergedLoss(f"training diverged in epoch {epoch}: {exc}") from exc
        log.append(epoch, total_loss / len(order), correct / len(order))
        logger.info("epoch %d loss %.4f acc %.3f", epoch, *log.epochs[-1][1:])
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return log
