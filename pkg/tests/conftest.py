"""Shared fixtures: phantom exams and deliberately tiny (untrained) models.

Unit tests exercise wiring, statuses and determinism with seeded untrained
models so they stay fast; only the acceptance suite trains real models.
"""

import numpy as np
import pytest

from cmrpipe.nn.models import ModelSpec, build_model
from cmrpipe.phantom_gen import PhantomSpec, generate_phantom_exam
from cmrpipe.pipeline import ModelBundle

TINY_CLASSIFIER = ModelSpec(architecture="sax_classifier", base_width=4,
                            depth=3, input_size=32)
TINY_LOCATOR = ModelSpec(architecture="unet3plus", out_classes=2,
                         base_width=2, depth=3, cat_width=2, input_size=32,
                         deep_supervision=True)
TINY_SEGMENTER = ModelSpec(architecture="unet3plus", out_classes=3,
                           base_width=2, depth=3, cat_width=2, input_size=32)


@pytest.fixture(scope="session")
def tiny_models() -> ModelBundle:
    """Seeded, untrained models — deterministic outputs, no quality."""
    return ModelBundle(
        classifier=build_model(TINY_CLASSIFIER, seed=1),
        locator=build_model(TINY_LOCATOR, seed=2),
        segmenter=build_model(TINY_SEGMENTER, seed=3),
    )


@pytest.fixture(scope="session")
def phantom_exam(tmp_path_factory):
    """One default-geometry exam plus its truth record."""
    d = tmp_path_factory.mktemp("exam")
    truth = generate_phantom_exam(PhantomSpec(seed=7), d)
    return d, truth


@pytest.fixture(scope="session")
def small_phantom_exam(tmp_path_factory):
    """A reduced-size exam (128², no distractors) for cheap pipeline tests."""
    d = tmp_path_factory.mktemp("small_exam")
    spec = PhantomSpec(seed=11, image_size=128, pixel_spacing=(2.0, 2.0),
                       n_distractors=0, n_slices=6, n_phases=10)
    truth = generate_phantom_exam(spec, d)
    return d, truth


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
