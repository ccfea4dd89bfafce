import os

# Serial math: faster at this scale and reproducible everywhere.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from stepmetric.datagen import DatasetSpec, generate_dataset


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(
        n_steps=3,
        images_per_split={"train": 4, "val": 3, "test": 3},
        error_test_images=3,
        image_size=32,
        seed=5,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    manifest = generate_dataset(tiny_spec, root)
    return root, manifest


def random_image(rng, size=16, label="step_01", image_id="img"):
    from stepmetric.labels import LabeledImage

    return LabeledImage(rng.random((size, size, 3), dtype=np.float32), label, image_id)
