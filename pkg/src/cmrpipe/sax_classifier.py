"""Short-axis stack identification (stage 2).

Each candidate stack is scored on the first frames of its five central
slices; the stack whose best slice probability is highest wins, with exact
ties broken by the mean probability and then by stack id so selection is
deterministic and independent of input order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dicom_ingest import CineStack
from .errors import NoCineStacksError
from .preprocess import preprocess_for_model

CENTRAL_K = 5


@dataclass(frozen=True)
class StackSelection:
    chosen_stack_id: str
    per_stack_scores: dict  # stack_id -> {"max", "mean", "per_slice"}

    def to_dict(self) -> dict:
        return {
            "chosen_stack_id": self.chosen_stack_id,
            "per_stack_scores": {
                k: {"max": v["max"], "mean": v["mean"],
                    "per_slice": list(v["per_slice"])}
                for k, v in self.per_stack_scores.items()
            },
        }


def central_slices(stack: CineStack, k: int = CENTRAL_K):
    """First frames of the k centrally indexed slices; for even counts the
    window starts at floor((n - k) / 2)."""
    n = stack.n_slices
    k = min(k, n)
    start = (n - k) // 2
    return [stack.frame_image(s, 0) for s in range(start, start + k)]


def score_stack(model, stack: CineStack, k: int = CENTRAL_K) -> np.ndarray:
    """Per-slice short-axis probabilities for the central slices."""
    side = model.spec.input_size
    imgs = central_slices(stack, k)
    batch = np.stack([preprocess_for_model(im.astype(np.float32), side).data
                      for im in imgs])[:, None]
    return model.predict(batch)


def select_sax_stack(stacks, model, k: int = CENTRAL_K) -> StackSelection:
    if not stacks:
        raise NoCineStacksError("no cine stacks")
    scores = {}
    for st in stacks:
        probs = score_stack(model, st, k)
        scores[st.stack_id] = {
            "max": float(probs.max()),
            "mean": float(probs.mean()),
            "per_slice": [float(p) for p in probs],
        }
    chosen = min(scores, key=lambda sid: (-scores[sid]["max"], -scores[sid]["mean"], sid))
    return StackSelection(chosen_stack_id=chosen, per_stack_scores=scores)


def per_slice_metrics(probs, labels, threshold: float = 0.5) -> dict:
    """Binary classification metrics at a strict > threshold cut.

    Vacuous denominators (no predicted positives / no true positives)
    yield 1.0 so degenerate suites read as perfect rather than crashing.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {labels.shape}")
    pred = probs > threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    total = tp + fp + fn + tn
    return {
        "accuracy": (tp + tn) / total if total else 1.0,
        "precision": tp / (tp + fp) if (tp + fp) else 1.0,
        "recall": tp / (tp + fn) if (tp + fn) else 1.0,
        "n": total,
    }
