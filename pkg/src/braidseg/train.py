"""Training: Dice+BCE loss, SGD with momentum and weight decay, per-epoch
polynomial (or exponential) learning-rate decay, light augmentation.

Determinism contract: with a fixed TrainConfig.seed the run is bitwise
reproducible. Every random draw comes from a generator keyed by
(seed, role, epoch/sample index), never from shared global state, so
batch order and augmentations are independent of execution history.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import load_sample, make_views, nearest_resize, save_checkpoint
from .tensor import Tensor

_ORDER_TAG = 0x0D0E


class NumericError(RuntimeError):
    """Training diverged into non-finite territory."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 2
    lr0: float = 3e-4
    momentum: float = 0.99
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    lr_schedule: str = "poly"          # poly | exp
    exp_gamma: float = 0.9
    seed: int = 0
    scale_range: tuple = (0.9, 1.1)
    shift_range: tuple = (-0.1, 0.1)
    flip_prob: float = 0.5
    invert_prob: float = 0.0
    augment: bool = True
    dice_weight: float = 1.0
    bce_weight: float = 1.0

    def validate(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("train config: epochs and batch must be positive")
        if self.lr_schedule not in ("poly", "exp"):
            raise ValueError(f"train config: unknown lr schedule {self.lr_schedule!r}")
        return self


def poly_lr(lr0, epoch, total_epochs, power=0.9):
    """lr0 * (1 - epoch/total)^power; exactly lr0 at 0, exactly 0 at total."""
    if not (0 <= epoch <= total_epochs):
        raise ValueError(f"poly_lr: epoch {epoch} outside 0..{total_epochs}")
    return lr0 * (1.0 - epoch / total_epochs) ** power


def exp_lr(lr0, epoch, gamma=0.9):
    return lr0 * gamma ** epoch


def lr_for_epoch(cfg, epoch):
    if cfg.lr_schedule == "poly":
        return poly_lr(cfg.lr0, epoch, cfg.epochs, cfg.poly_power)
    return exp_lr(cfg.lr0, epoch, cfg.exp_gamma)


# ---------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------

def soft_dice(logits, target):
    """(2 sum(p*g) + 1) / (sum(p) + sum(g) + 1) with p = sigmoid(logits)."""
    p = T.sigmoid(logits)
    one = Tensor(np.asarray(1.0, dtype=logits.dtype))
    inter = T.tensor_sum(T.mul(p, target))
    denom = T.add(T.add(T.tensor_sum(p), T.tensor_sum(target)), one)
    return T.div(T.add(T.scale(inter, 2.0), one), denom)


def seg_loss(logits, target, dice_weight=1.0, bce_weight=1.0):
    """w_d * (1 - soft Dice) + w_b * BCE; scalar Tensor."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=logits.dtype))
    if target.shape != logits.shape:
        raise ValueError(f"seg_loss: target {target.shape} != logits {logits.shape}")
    one = Tensor(np.asarray(1.0, dtype=logits.dtype))
    dice_term = T.sub(one, soft_dice(logits, target))
    bce_term = T.bce_with_logits(logits, target)
    return T.add(T.scale(dice_term, dice_weight), T.scale(bce_term, bce_weight))


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------

class SgdState:
    """Per-parameter velocity buffers, keyed by parameter name."""

    def __init__(self):
        self.velocity = {}

    def vel(self, name, like):
        v = self.velocity.get(name)
        if v is None:
            v = np.zeros_like(like)
            self.velocity[name] = v
        return v


def sgd_step(named_params, state, lr, momentum=0.99, weight_decay=1e-4):
    """g' = g + wd*theta;  v <- mu*v + g';  theta <- theta - lr*v  (in place)."""
    for name, p in named_params:
        if p.grad is None or not p.requires_grad:
            raise ValueError(f"sgd: missing gradient for parameter {name!r}")
        g = p.grad + weight_decay * p.data
        v = momentum * state.vel(name, p.data) + g
        state.velocity[name] = v
        p.data = p.data - lr * v


# ---------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------

def augment(image, mask, rng, cfg):
    """Intensity scale/shift on the image only, plus paired random flips.

    The mask is never intensity-altered; flips apply to both identically,
    so the foreground pixel count is invariant. With invert_prob > 0 the
    image contrast is flipped (1 - x) on some draws, which teaches a model
    trained on one intensity polarity to tolerate the opposite one.

    Every possible draw is taken on every call, in a fixed order, so the
    random stream consumed per sample does not depend on the outcomes.
    """
    s = rng.uniform(*cfg.scale_range)
    t = rng.uniform(*cfg.shift_range)
    img = np.clip(image * s + t, 0.0, 1.0).astype(np.float32)
    msk = mask
    if rng.uniform() < cfg.invert_prob:
        img = (1.0 - img).astype(np.float32)
    if rng.uniform() < cfg.flip_prob:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if rng.uniform() < cfg.flip_prob:
        img, msk = img[::-1, :], msk[::-1, :]
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


# ---------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------

def train(model, root, samples, cfg, out_dir=None, log=None):
    """Train in place; returns the loss-log rows.

    samples: the (already filtered) training samples. Writes
    out_dir/loss_log.csv and out_dir/checkpoint/ when out_dir is given.
    Raises NumericError the moment the loss stops being finite.
    """
    cfg.validate()
    if not samples:
        raise ValueError("train: empty sample list")
    loaded = [load_sample(root, s) for s in samples]
    mcfg = model.cfg
    state = SgdState()
    params = model.named_params()
    rows = [("iteration", "epoch", "lr", "loss")]
    iteration = 0
    for epoch in range(cfg.epochs):
        lr = lr_for_epoch(cfg, epoch)
        order_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _ORDER_TAG, epoch]))
        order = order_rng.permutation(len(loaded))
        for start in range(0, len(order), cfg.batch):
            idxs = order[start:start + cfg.batch]
            xc_b, xs_b, tgt_b = [], [], []
            for i in idxs:
                img, msk = loaded[i]
                if cfg.augment:
                    arng = np.random.default_rng(
                        np.random.SeedSequence([cfg.seed, epoch, int(i)]))
                    img, msk = augment(img, msk, arng, cfg)
                xc, xs = make_views(img, mcfg)
                if msk.shape[0] != mcfg.x_c:
                    msk = nearest_resize(msk, mcfg.x_c)
                xc_b.append(xc)
                xs_b.append(xs)
                tgt_b.append(msk[None, None])
            logits = model.forward(np.concatenate(xc_b), np.concatenate(xs_b))
            loss = seg_loss(logits, np.concatenate(tgt_b),
                            cfg.dice_weight, cfg.bce_weight)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss {loss_val} at iteration {iteration + 1} "
                    f"(epoch {epoch}, lr {lr:g})")
            loss.backward()
            sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay)
            model.zero_grad()
            iteration += 1
            rows.append((iteration, epoch, repr(float(lr)), repr(loss_val)))
            if log is not None and iteration % 25 == 0:
                log(f"iter {iteration:5d} epoch {epoch:3d} lr {lr:.3e} loss {loss_val:.4f}")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_loss_log(rows, os.path.join(out_dir, "loss_log.csv"))
        save_checkpoint(model, os.path.join(out_dir, "checkpoint"),
                        epoch=cfg.epochs, seed=cfg.seed)
    return rows


def write_loss_log(rows, path):
    with open(path, "w") as f:
        for r in rows:
            f.write(",".join(str(c) for c in r) + "\n")
