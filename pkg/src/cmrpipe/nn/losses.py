"""Training losses with analytic gradients with respect to predicted probabilities.

All losses take probabilities (post sigmoid/softmax), not logits. Each
loss has a value function and a matching _grad function returning
(value, dvalue/dpred); gradients are exact where the value is
differentiable and zero inside clamped regions.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolation

BCE_CLAMP = 1e-7
OVERLAP_EPS = 1e-6


def _check_same_shape(pred, target):
    if pred.shape != target.shape:
        raise ContractViolation(f"shape mismatch: {pred.shape} vs {target.shape}")


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    return bce_grad(pred, target)[0]


def bce_grad(pred: np.ndarray, target: np.ndarray):
    _check_same_shape(pred, target)
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target
    loss = float(np.mean(-t * np.log(p) - (1.0 - t) * np.log1p(-p)))
    grad = (-t / p + (1.0 - t) / (1.0 - p)) / pred.size
    grad = grad * ((pred > BCE_CLAMP) & (pred < 1.0 - BCE_CLAMP))
    return loss, grad.astype(pred.dtype)


def soft_iou_loss(pred: np.ndarray, target: np.ndarray, eps: float = OVERLAP_EPS) -> float:
    return soft_iou_grad(pred, target, eps)[0]


def soft_iou_grad(pred: np.ndarray, target: np.ndarray, eps: float = OVERLAP_EPS):
    """1 - soft intersection-over-union of a foreground probability map."""
    _check_same_shape(pred, target)
    t = target.astype(pred.dtype)
    inter = float((pred * t).sum())
    union = float(pred.sum() + t.sum() - inter)
    loss = 1.0 - (inter + eps) / (union + eps)
    denom = (union + eps) ** 2
    grad = -(t * (union + eps) - (inter + eps) * (1.0 - t)) / denom
    return float(loss), grad.astype(pred.dtype)


def _downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour mask downsampling by an integer factor.

    Uses the same source-coordinate convention as the image resizer so
    supervision targets line up with what the inverse mapping produces.
    """
    if factor == 1:
        return mask
    out_h = mask.shape[-2] // factor
    out_w = mask.shape[-1] // factor
    src_r = np.arange(out_h) * factor + factor / 2.0 - 0.5
    src_c = np.arange(out_w) * factor + factor / 2.0 - 0.5
    rows = np.clip(np.ceil(src_r - 0.5).astype(int), 0, mask.shape[-2] - 1)
    cols = np.clip(np.ceil(src_c - 0.5).astype(int), 0, mask.shape[-1] - 1)
    return mask[..., rows[:, None], cols[None, :]]


def deep_supervised_iou_loss(preds: list[np.ndarray], target: np.ndarray,
                             weights=None, eps: float = OVERLAP_EPS) -> float:
    value, _ = deep_supervised_iou_grad(preds, target, weights, eps)
    return value


def deep_supervised_iou_grad(preds: list[np.ndarray], target: np.ndarray,
                             weights=None, eps: float = OVERLAP_EPS):
    """Weighted soft-IoU across decoder scales; full resolution first.

    Coarser targets are nearest-downsampled copies of the full mask.
    Weights default to uniform and must sum to 1.
    """
    if weights is None:
        weights = [1.0 / len(preds)] * len(preds)
    if len(weights) != len(preds):
        raise ContractViolation("one weight per prediction scale is required")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ContractViolation("deep-supervision weights must sum to 1")
    full = target.shape[-1]
    total = 0.0
    grads = []
    for w, p in zip(weights, preds):
        factor = full // p.shape[-1]
        if factor * p.shape[-1] != full:
            raise ContractViolation("prediction scales must divide the target size")
        t = _downsample_mask(target, factor)
        value, g = soft_iou_grad(p, t, eps)
        total += w * value
        grads.append(w * g)
    return float(total), grads


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N,H,W) integer labels -> (N,K,H,W) one-hot."""
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractViolation("label values outside [0, num_classes)")
    eye = np.eye(num_classes, dtype=dtype)
    return eye[labels].transpose(0, 3, 1, 2)


def tversky_loss(pred: np.ndarray, target: np.ndarray, alpha: float = 0.5,
                 beta: float = 0.5, eps: float = OVERLAP_EPS) -> float:
    return tversky_grad(pred, target, alpha, beta, eps)[0]


def tversky_grad(pred: np.ndarray, target: np.ndarray, alpha: float = 0.5,
                 beta: float = 0.5, eps: float = OVERLAP_EPS):
    """Mean Tversky loss over foreground classes of (N,K,H,W) probabilities.

    target is one-hot with matching shape; class 0 is background and is
    excluded from the mean (it still receives gradient through softmax
    coupling upstream, but contributes no loss term directly).
    """
    _check_same_shape(pred, target)
    if pred.ndim != 4 or pred.shape[1] < 2:
        raise ContractViolation("expected (N,K,H,W) probabilities with K >= 2")
    n_fg = pred.shape[1] - 1
    total = 0.0
    grad = np.zeros_like(pred)
    for c in range(1, pred.shape[1]):
        p = pred[:, c]
        t = target[:, c]
        tp = float((p * t).sum())
        fp = float((p * (1.0 - t)).sum())
        fn = float(((1.0 - p) * t).sum())
        num = tp + eps
        den = tp + alpha * fp + beta * fn + eps
        total += 1.0 - num / den
        dden_dp = t + alpha * (1.0 - t) - beta * t
        grad[:, c] = -(t * den - num * dden_dp) / (den * den) / n_fg
    return float(total / n_fg), grad


def soft_dice_loss(pred: np.ndarray, target: np.ndarray, eps: float = OVERLAP_EPS) -> float:
    """Mean soft Dice loss over foreground classes.

    Written as (I + eps) / (I + 0.5 FP + 0.5 FN + eps) per class, i.e. the
    eps sits in the same place as in the Tversky ratio, so this equals
    tversky_loss with alpha = beta = 0.5 up to float rounding.
    """
    _check_same_shape(pred, target)
    if pred.ndim != 4 or pred.shape[1] < 2:
        raise ContractViolation("expected (N,K,H,W) probabilities with K >= 2")
    total = 0.0
    for c in range(1, pred.shape[1]):
        p = pred[:, c]
        t = target[:, c]
        inter = float((p * t).sum())
        fp = float((p * (1.0 - t)).sum())
        fn = float(((1.0 - p) * t).sum())
        total += 1.0 - (inter + eps) / (inter + 0.5 * fp + 0.5 * fn + eps)
    return float(total / (pred.shape[1] - 1))
