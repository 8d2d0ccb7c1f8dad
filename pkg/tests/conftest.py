import numpy as np
import pytest

from contextshot.datasets import LabeledImageSet
from contextshot.shapes import ShapesSpec, generate_shapes


@pytest.fixture(scope="session")
def tiny_shapes() -> LabeledImageSet:
    """12 classes x 12 images at 16x16; enough for episode/eval tests."""
    return generate_shapes(ShapesSpec(n_classes=12, per_class=12, image_size=(16, 16)), seed=101)


@pytest.fixture(scope="session")
def micro_shapes() -> LabeledImageSet:
    """4 classes x 24 images at 16x16; enough for quick pretraining runs."""
    return generate_shapes(ShapesSpec(n_classes=4, per_class=24, image_size=(16, 16)), seed=202)


def random_image_set(rng: np.random.Generator, n_classes: int, per_class: int, size=(8, 8)) -> LabeledImageSet:
    """Unstructured random pixels; for contract tests that ignore content."""
    n = n_classes * per_class
    return LabeledImageSet(
        pixels=rng.random((n, *size, 3), dtype=np.float32),
        class_ids=np.repeat(np.arange(n_classes), per_class),
        class_names=tuple(f"c{i:02d}" for i in range(n_classes)),
        image_ids=tuple(f"{i}" for i in range(n)),
    )
