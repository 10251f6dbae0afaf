"""Source training: SGD with momentum, step learning-rate decay, rotation
and optional HSV augmentation.

Weight decay is decoupled from the gradient (w <- w * (1 - lr * wd) after
the momentum step) and applies to conv/dense weights only, so with a zero
data gradient parameters shrink by exactly the decay factor each step.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DivergenceError
from .layers import Model, TASK_CLASSIFICATION
from .seeding import derive_rng
from .stainsim import CenterDataset, hsv_to_rgb, rgb_to_hsv

Array = np.ndarray


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = 15
    lr: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_factor: float = 0.1
    decay_epochs: tuple = (10,)
    augment: str = "rotation"  # none | rotation | trtaug

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError(
                f"decay factor must be in (0, 1], got {self.decay_factor}"
            )
        if self.batch_size < 2:
            raise ConfigurationError(
                f"batch size must be >= 2, got {self.batch_size}"
            )
        if self.augment not in ("none", "rotation", "trtaug"):
            raise ConfigurationError(f"unknown augmentation mode {self.augment!r}")


# `desk` trains the toy benchmark in minutes; `paper` mirrors the recipe
# used for the full-scale experiments (55 epochs, lr 1e-3, batch 64,
# weight decay 1e-2, 0.1 step decay).
RECIPES = {
    "desk": TrainRecipe(),
    "paper": TrainRecipe(
        epochs=55, lr=0.001, batch_size=64, weight_decay=0.01, decay_epochs=(40,)
    ),
}

# train-time HSV jitter ranges (hue shift, saturation scale, value scale)
HSV_HUE = 0.05
HSV_SAT = (0.7, 1.3)
HSV_VAL = (0.7, 1.3)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # (epoch, mean loss, train metric)
    seed: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_metric"])
        for epoch, loss, metric in self.epochs:
            w.writerow([epoch, repr(float(loss)), repr(float(metric))])
        return buf.getvalue()


def _rotate_batch(x: Array, masks: Optional[Array], ks: Array):
    """Per-sample k*90-degree rotations; masks rotate with their image."""
    out = np.empty_like(x)
    mout = np.empty_like(masks) if masks is not None else None
    for i, k in enumerate(ks):
        out[i] = np.rot90(x[i], int(k), axes=(1, 2))
        if masks is not None:
            mout[i] = np.rot90(masks[i], int(k), axes=(1, 2))
    return out, mout


def _hsv_jitter_batch(x: Array, rng: np.random.Generator) -> Array:
    """Independent HSV perturbation per sample, on [0, 1] pixel values."""
    n = x.shape[0]
    hues = rng.uniform(-HSV_HUE, HSV_HUE, size=n)
    sats = rng.uniform(*HSV_SAT, size=n)
    vals = rng.uniform(*HSV_VAL, size=n)
    hsv = rgb_to_hsv(np.moveaxis(x.astype(np.float64), 1, -1))
    hsv[..., 0] = (hsv[..., 0] + hues[:, None, None]) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sats[:, None, None], 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * vals[:, None, None], 0.0, 1.0)
    return np.moveaxis(hsv_to_rgb(hsv), -1, 1).astype(x.dtype)


class SGDM:
    """SGD with momentum and decoupled weight decay."""

    def __init__(self, params, decayed, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.decayed = set(id(p) for p in decayed)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[id(p)]
            v *= self.momentum
            v += p.grad
            p.value -= np.float32(self.lr) * v
            if self.weight_decay and id(p) in self.decayed:
                p.value *= np.float32(1.0 - self.lr * self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train(
    model: Model,
    dataset: CenterDataset,
    recipe: TrainRecipe,
    seed: int,
    verbose: bool = False,
) -> TrainLog:
    """Fit the model in place; deterministic given (model init, seed).

    Raises DivergenceError naming the epoch and learning rate if the loss
    goes non-finite. Returns the per-epoch log (loss, train metric).
    """
    recipe.validate()
    if dataset.n == 0:
        raise ConfigurationError("training dataset is empty")
    classification = model.spec.task == TASK_CLASSIFICATION
    if classification:
        if dataset.labels is None:
            raise ConfigurationError("classification training needs labels")
        if dataset.labels.max() >= model.spec.num_classes:
            raise ConfigurationError(
                f"label {int(dataset.labels.max())} outside {model.spec.num_classes} classes"
            )
    elif dataset.masks is None:
        raise ConfigurationError("dense-prediction training needs masks")

    rng = derive_rng(seed, "train")
    opt = SGDM(
        model.params(),
        model.decayed_params(),
        lr=recipe.lr,
        momentum=recipe.momentum,
        weight_decay=recipe.weight_decay,
    )
    log = TrainLog(seed=seed)

    for epoch in range(recipe.epochs):
        decays = sum(1 for e in recipe.decay_epochs if epoch >= e)
        opt.lr = recipe.lr * recipe.decay_factor**decays
        order = rng.permutation(dataset.n)
        losses = []
        hits = 0.0
        total = 0
        inter = 0.0
        denom = 0.0
        for lo in range(0, dataset.n, recipe.batch_size):
            idx = order[lo : lo + recipe.batch_size]
            if idx.size < 2:
                continue  # a single leftover sample cannot carry batch statistics
            x = dataset.images[idx]
            m = dataset.masks[idx] if dataset.masks is not None else None
            if recipe.augment in ("rotation", "trtaug"):
                ks = rng.integers(0, 4, size=idx.size)
                x, m = _rotate_batch(x, m, ks)
            if recipe.augment == "trtaug":
                x = _hsv_jitter_batch(x, rng)

            logits = model.forward_train(x)
            if classification:
                y = dataset.labels[idx]
                loss = T.softmax_cross_entropy(logits, y)
                pred = logits.value.argmax(axis=1)
                hits += float((pred == y).sum())
                total += idx.size
            else:
                probs = T.sigmoid(logits)
                loss = T.soft_dice_loss(probs, m, smooth=1.0)
                p = probs.value >= 0.5
                inter += float((p * m).sum())
                denom += float(p.sum() + m.sum())

            if not np.isfinite(loss.value):
                raise DivergenceError(epoch=epoch, lr=opt.lr)
            losses.append(float(loss.value))
            opt.zero_grad()
            T.backward(loss)
            opt.step()

        metric = hits / max(total, 1) if classification else (
            2.0 * inter / denom if denom else 1.0
        )
        log.epochs.append((epoch, float(np.mean(losses)), metric))
        if verbose:
            print(
                f"epoch {epoch:3d}  lr {opt.lr:.5f}  loss {np.mean(losses):.4f}  "
                f"train metric {metric:.4f}"
            )
    return log
