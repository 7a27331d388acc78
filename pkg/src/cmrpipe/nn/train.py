"""Minibatch Adam training loop for the numpy models.

The loop is deterministic for a fixed seed: shuffles come from one
Generator, parameters update in the iteration order of model.params(),
and no wall-clock state enters the computation. A NaN/inf loss aborts
with TrainingDivergedError rather than continuing silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation, TrainingDivergedError
from . import losses


@dataclass
class LossConfig:
    kind: str = "bce"  # bce | soft_iou | tversky
    tversky_alpha: float = 0.5
    tversky_beta: float = 0.5
    ds_weights: tuple | None = None  # deep-supervision weights, full scale first

    def __post_init__(self):
        if self.kind not in ("bce", "soft_iou", "tversky"):
            raise ContractViolation(f"unknown loss kind {self.kind!r}")
        if self.tversky_alpha < 0 or self.tversky_beta < 0 \
                or self.tversky_alpha + self.tversky_beta <= 0:
            raise ContractViolation("tversky weights must be non-negative, not both zero")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = True
    val_fraction: float = 0.0
    patience: int = 5
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ContractViolation("lr must be >= 0, batch_size/epochs >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractViolation("val_fraction must be in [0, 1)")


class Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.lr * (m / b1t) / (np.sqrt(v / b2t) + cfg.adam_eps)


def _loss_and_grad(model, xb, yb, loss_cfg: LossConfig):
    """Forward + loss; returns (loss value, grads dict)."""
    out, tape = model.forward(xb, train=True)
    if loss_cfg.kind == "bce":
        value, dout = losses.bce_grad(out, yb)
    elif loss_cfg.kind == "soft_iou":
        if isinstance(out, list):
            fg = [o[:, 1] for o in out]
            value, dfg = losses.deep_supervised_iou_grad(fg, yb, loss_cfg.ds_weights)
            dout = []
            for o, g in zip(out, dfg):
                d = np.zeros_like(o)
                d[:, 1] = g
                dout.append(d)
        else:
            value, g = losses.soft_iou_grad(out[:, 1], yb)
            dout = np.zeros_like(out)
            dout[:, 1] = g
    else:  # tversky
        if isinstance(out, list):
            raise ContractViolation("tversky training expects a single output scale")
        target = losses.one_hot(yb, out.shape[1], dtype=out.dtype)
        value, dout = losses.tversky_grad(out, target, loss_cfg.tversky_alpha,
                                          loss_cfg.tversky_beta)
    grads = model.backward(dout, tape)
    return value, grads


def _eval_loss(model, x, y, loss_cfg: LossConfig, batch_size: int) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        out = model.forward(xb)
        if loss_cfg.kind == "bce":
            total += losses.bce_loss(out, yb) * len(xb)
        elif loss_cfg.kind == "soft_iou":
            if isinstance(out, list):
                total += losses.deep_supervised_iou_loss(
                    [o[:, 1] for o in out], yb, loss_cfg.ds_weights) * len(xb)
            else:
                total += losses.soft_iou_loss(out[:, 1], yb) * len(xb)
        else:
            target = losses.one_hot(yb, out.shape[1], dtype=out.dtype)
            total += losses.tversky_loss(out, target, loss_cfg.tversky_alpha,
                                         loss_cfg.tversky_beta) * len(xb)
    return total / max(len(x), 1)


def train(model, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig):
    """Train in place; returns (model, history).

    history carries per-step training loss and, when val_fraction > 0,
    per-epoch validation loss with early stopping (best weights restored).
    """
    if len(inputs) != len(targets) or len(inputs) == 0:
        raise ContractViolation("inputs and targets must be equal-length and non-empty")
    rng = np.random.default_rng(cfg.seed)
    n_val = int(round(cfg.val_fraction * len(inputs)))
    if n_val:
        perm = rng.permutation(len(inputs))
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
        x_val, y_val = inputs[val_idx], targets[val_idx]
        x_tr, y_tr = inputs[tr_idx], targets[tr_idx]
    else:
        x_tr, y_tr = inputs, targets
    if len(x_tr) == 0:
        raise ContractViolation("validation split leaves no training samples")

    params = model.params()
    opt = Adam(params, cfg)
    history = {"loss": [], "val_loss": []}
    best_val = math.inf
    best_params = None
    bad_epochs = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(x_tr)) if cfg.shuffle else np.arange(len(x_tr))
        for i in range(0, len(order), cfg.batch_size):
            sel = order[i:i + cfg.batch_size]
            value, grads = _loss_and_grad(model, x_tr[sel], y_tr[sel], cfg.loss)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at step {opt.t}")
            history["loss"].append(float(value))
            opt.step(grads)
        if n_val:
            val = _eval_loss(model, x_val, y_val, cfg.loss, cfg.batch_size)
            history["val_loss"].append(float(val))
            if val < best_val - 1e-12:
                best_val = val
                best_params = {k: v.copy() for k, v in params.items()}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
    if best_params is not None:
        for k, v in params.items():
            v[...] = best_params[k]
    return model, history
