"""End-to-end training recipes for the three pipeline models.

Each recipe builds its dataset from a list of exam directories, constructs
the model at the pipeline's expected input size, trains with the loss that
stage calls for (cross-entropy for the classifier, deeply supervised soft
IoU for the locator, Tversky for the segmenter) and returns the trained
model plus its loss history. train_all_models additionally saves a weight
bundle with one subdirectory per model.
"""

from __future__ import annotations

from pathlib import Path

from . import datasets
from .nn.models import ModelSpec, build_model
from .nn.train import LossConfig, TrainConfig, train
from .nn.weights import save_model

# Network sizes for desk-scale (single CPU core) training. The UNet widths
# and depths are deliberately small; the pipeline contracts only fix the
# input sides and class counts, and the architecture is recorded in each
# bundle, so larger models drop in without code changes.
CLASSIFIER_SPEC = ModelSpec(architecture="sax_classifier", base_width=16,
                            depth=4, input_size=128)
LOCATOR_SPEC = ModelSpec(architecture="unet3plus", out_classes=2,
                         base_width=6, depth=3, cat_width=6,
                         input_size=256, deep_supervision=True)
SEGMENTER_SPEC = ModelSpec(architecture="unet3plus", out_classes=3,
                           base_width=8, depth=3, cat_width=8,
                           input_size=128)


def train_sax_classifier(exam_dirs, seed: int = 0, epochs: int = 4,
                         lr: float = 2e-3):
    x, y = datasets.build_classifier_dataset(
        exam_dirs, input_size=CLASSIFIER_SPEC.input_size)
    model = build_model(CLASSIFIER_SPEC, seed=seed)
    cfg = TrainConfig(lr=lr, batch_size=16, epochs=epochs, seed=seed,
                      loss=LossConfig(kind="bce"))
    return train(model, x, y, cfg)


def train_heart_locator(exam_dirs, seed: int = 0, epochs: int = 2,
                        lr: float = 3e-3):
    # first-phase frames only: that is all the pipeline ever shows it
    x, y = datasets.build_locator_dataset(
        exam_dirs, input_size=LOCATOR_SPEC.input_size, phases=(0,))
    model = build_model(LOCATOR_SPEC, seed=seed)
    cfg = TrainConfig(lr=lr, batch_size=4, epochs=epochs, seed=seed,
                      loss=LossConfig(kind="soft_iou"))
    return train(model, x, y, cfg)


def train_ventricle_segmenter(exam_dirs, seed: int = 0, epochs: int = 2,
                              lr: float = 3e-3):
    x, y = datasets.build_segmenter_dataset(
        exam_dirs, input_size=SEGMENTER_SPEC.input_size,
        phases=("ed", "es"))
    model = build_model(SEGMENTER_SPEC, seed=seed)
    cfg = TrainConfig(lr=lr, batch_size=8, epochs=epochs, seed=seed,
                      loss=LossConfig(kind="tversky", tversky_alpha=0.5,
                                      tversky_beta=0.5))
    return train(model, x, y, cfg)


_RECIPES = {
    "classifier": train_sax_classifier,
    "locator": train_heart_locator,
    "segmenter": train_ventricle_segmenter,
}


def train_model(kind: str, exam_dirs, seed: int = 0, **kwargs):
    """Train one model by kind: classifier | locator | segmenter."""
    if kind not in _RECIPES:
        raise ValueError(f"unknown model kind {kind!r}; "
                         f"expected one of {sorted(_RECIPES)}")
    return _RECIPES[kind](exam_dirs, seed=seed, **kwargs)


def train_all_models(exam_dirs, bundle_dir, seed: int = 0) -> dict:
    """Train classifier, locator and segmenter; save each under
    bundle_dir/<kind>/. Returns {kind: loss history}."""
    bundle = Path(bundle_dir)
    histories = {}
    for kind in ("classifier", "locator", "segmenter"):
        model, history = train_model(kind, exam_dirs, seed=seed)
        save_model(model, bundle / kind)
        histories[kind] = history
    return histories
