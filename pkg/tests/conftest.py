import zlib

import numpy as np
import pytest

from guided_dml.datapipe.main import (
    ClassLabel,
    PatchRecord,
    View,
    generate_synthetic_dataset,
    split_dataset,
)
from guided_dml.models.main import StudentConfig, TeacherConfig

TOY_PATCH = 64


@pytest.fixture
def make_patch():
    def factory(patch_id, label_index=0, size=8, values=None, view=View.SUR, name=None):
        if values is None:
            rng = np.random.default_rng(zlib.crc32(patch_id.encode()))
            values = rng.normal(size=(size, size, 3)).astype(np.float32)
        label = None
        if label_index is not None:
            label = ClassLabel(name=name or f"C{label_index}", index=label_index)
        return PatchRecord(
            patch_id=patch_id,
            values=values,
            label=label,
            view=view,
            source_image_id=f"img-{patch_id}",
            grid_position=(0, 0),
        )

    return factory


def _toy_split(view):
    images = generate_synthetic_dataset(2, 4, (256, 256), seed=0, view=view)
    return split_dataset(images, train_fraction=0.75, seed=0, patch_size=TOY_PATCH, max_overlap=0)


@pytest.fixture(scope="session")
def toy_split():
    """Two synthetic classes, 48 train and 16 test patches of 64x64 each per class."""
    return _toy_split(View.SUR)


@pytest.fixture(scope="session")
def toy_section_split():
    return _toy_split(View.SEC)


@pytest.fixture
def teacher_config():
    return TeacherConfig(n_classes=2, embedding_dim=16, patch_size=TOY_PATCH)


@pytest.fixture
def student_config():
    return StudentConfig(embedding_dim=16, n_classes=2, patch_size=TOY_PATCH)
