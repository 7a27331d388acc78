"""Training-set assembly from synthetic exams.

Each builder walks a list of exam directories (as written by
generate_phantom_exam), re-ingests the DICOM files through the standard
extraction path, and pairs model-ready input tensors with targets derived
from the stored ground-truth label masks. Re-ingesting instead of reusing
in-memory arrays keeps the training distribution identical to what the
pipeline sees at inference time — same grouping, same slice order, same
preprocessing chain.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dicom_ingest import CineStack, extract_stacks
from .errors import ContractViolation
from .heart_locator import compute_bounding_box, crop_stack
from .phantom_gen import (
    generate_phantom_exam,
    load_truth,
    load_truth_labels,
    sample_spec,
)
from .preprocess import pad_to_square, preprocess_for_model, resize
from .sax_classifier import CENTRAL_K, central_slices


def generate_training_exams(n: int, out_root, base_seed: int = 0,
                            **spec_overrides) -> list:
    """Write n geometrically varied exams under out_root, one directory each.

    Returns the exam directories in generation order. Deterministic in
    base_seed (directory names included), so suites are reproducible.
    """
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i in range(n):
        spec = sample_spec(base_seed + i, **spec_overrides)
        exam_dir = root / f"exam_{base_seed + i:04d}"
        generate_phantom_exam(spec, exam_dir)
        dirs.append(exam_dir)
    return dirs


def _label_grid(label2d: np.ndarray, side: int) -> np.ndarray:
    """Carry a label image through the geometric half of the input chain
    (pad to square, nearest resize) without intensity normalization."""
    t = resize(pad_to_square(label2d.astype(np.float32)), side, mode="nearest")
    return t.data.astype(np.uint8)


def _sax_stack(stacks, truth: dict) -> CineStack:
    for stack in stacks:
        if truth["sax_series_uid"] in stack.source_series:
            return stack
    raise ContractViolation("exam has no stack from the ground-truth SAX series")


def _resolve_phase(phase, truth: dict, n_phases: int) -> int:
    if phase == "ed":
        return int(truth["ed_phase"])
    if phase == "es":
        return int(truth["es_phase"])
    if phase == "mid":
        return int(truth["es_phase"]) // 2
    p = int(phase)
    if not 0 <= p < n_phases:
        raise ContractViolation(f"phase {phase!r} out of range 0..{n_phases - 1}")
    return p


def build_classifier_dataset(exam_dirs, input_size: int = 128,
                             k: int = CENTRAL_K):
    """(x, y) for the short-axis classifier.

    One sample per central slice of every cine stack in every exam; label 1
    when the stack comes from the ground-truth SAX series, else 0.
    """
    xs, ys = [], []
    for d in exam_dirs:
        stacks, _ = extract_stacks(d)
        truth = load_truth(d)
        for stack in stacks:
            label = 1.0 if truth["sax_series_uid"] in stack.source_series else 0.0
            for img in central_slices(stack, k):
                xs.append(preprocess_for_model(img.astype(np.float32),
                                               input_size).data)
                ys.append(label)
    x = np.stack(xs)[:, None].astype(np.float32)
    y = np.asarray(ys, dtype=np.float32)
    return x, y


def build_locator_dataset(exam_dirs, input_size: int = 256,
                          phases=(0, "es")):
    """(x, y) for the heart locator: full-frame images and binary
    whole-heart masks (any ventricle label) on the model grid.

    The pipeline only ever shows the locator first-phase frames; training
    with an extra phase (default: end systole) covers the contraction range.
    """
    xs, ys = [], []
    for d in exam_dirs:
        stacks, _ = extract_stacks(d)
        truth = load_truth(d)
        labels = load_truth_labels(d)
        stack = _sax_stack(stacks, truth)
        for phase in phases:
            t = _resolve_phase(phase, truth, stack.n_frames)
            for s in range(stack.n_slices):
                xs.append(preprocess_for_model(
                    stack.frame_image(s, t).astype(np.float32), input_size).data)
                ys.append(_label_grid(labels[t, s] > 0, input_size))
    x = np.stack(xs)[:, None].astype(np.float32)
    y = np.stack(ys).astype(np.float32)
    return x, y


def build_segmenter_dataset(exam_dirs, input_size: int = 128,
                            phases=("ed", "mid", "es")):
    """(x, y) for the ventricle segmenter: heart-cropped images and
    3-class label grids (0 background, 1 blood pool, 2 myocardium).

    The crop box is derived from the ground-truth masks with the same
    box rule the pipeline applies to predicted masks.
    """
    xs, ys = [], []
    for d in exam_dirs:
        stacks, _ = extract_stacks(d)
        truth = load_truth(d)
        labels = load_truth_labels(d)
        stack = _sax_stack(stacks, truth)
        masks = [labels[0, s] > 0 for s in range(stack.n_slices)]
        box = compute_bounding_box(masks)
        cropped = crop_stack(stack, box)
        for phase in phases:
            t = _resolve_phase(phase, truth, stack.n_frames)
            for s in range(stack.n_slices):
                xs.append(preprocess_for_model(
                    cropped.frame_image(s, t).astype(np.float32), input_size).data)
                lab = labels[t, s][box.row0:box.row1, box.col0:box.col1]
                ys.append(_label_grid(lab, input_size))
    x = np.stack(xs)[:, None].astype(np.float32)
    y = np.stack(ys).astype(np.int64)
    return x, y
