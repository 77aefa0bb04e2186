"""Pytest configuration and shared fixtures."""

import json
from pathlib import Path

import numpy as np
import pytest

from spmatch.domain.models import FeatureConfig
from spmatch.domain.types import ImageGrid, LabelMap
from spmatch.services.decompose import import_decomposition
from spmatch.services.experiments import synthetic_texture
from spmatch.services.imaging import save_image, save_labelmap
from spmatch.services.library import featurize


def block_labels(height: int, width: int, block: int) -> np.ndarray:
    """Square blocks of side ``block`` numbered in raster order."""
    rows = np.arange(height)[:, None] // block
    cols = np.arange(width)[None, :] // block
    return rows * ((width + block - 1) // block) + cols


@pytest.fixture
def project_root():
    """Return the project root directory."""
    return Path(__file__).parent.parent


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def block_decomposition():
    """Factory: a grid of square superpixels."""

    def make(height: int, width: int, block: int):
        return import_decomposition(LabelMap(block_labels(height, width, block)))

    return make


@pytest.fixture
def texture():
    """Factory: a smooth random color texture."""

    def make(size: int = 32, seed: int = 0, smoothness: float = 3.0) -> ImageGrid:
        return synthetic_texture(size, size, np.random.default_rng(seed), smoothness=smoothness)

    return make


@pytest.fixture
def featured(block_decomposition, texture):
    """Factory: a textured image on a block grid, featurized with mean color."""

    def make(size: int = 32, block: int = 4, seed: int = 0, labels=None, config=None):
        image = texture(size, seed)
        decomp = block_decomposition(size, size, block)
        return featurize(image, decomp, config or FeatureConfig(), labels=labels, name=f"tex{seed}")

    return make


@pytest.fixture
def workspace(tmp_path, texture):
    """Test image, two labeled exemplars and a library manifest on disk."""
    size = 32
    labels = np.zeros((size, size), dtype=np.int64)
    labels[:, size // 2 :] = 1

    test_path = tmp_path / "test.png"
    save_image(texture(size, 0), test_path)
    save_labelmap(LabelMap(labels), tmp_path / "test_gt.png")

    entries = []
    for n in (1, 2):
        image_path = tmp_path / f"lib{n}.png"
        save_image(texture(size, n), image_path)
        save_labelmap(LabelMap(labels), tmp_path / f"lib{n}_gt.png")
        entries.append({"image": image_path.name, "labels": f"lib{n}_gt.png"})

    manifest = tmp_path / "library.json"
    manifest.write_text(json.dumps(entries))

    unlabeled = tmp_path / "unlabeled.json"
    unlabeled.write_text(json.dumps([{"image": "lib1.png"}]))

    return {
        "root": tmp_path,
        "test": test_path,
        "truth": tmp_path / "test_gt.png",
        "manifest": manifest,
        "unlabeled": unlabeled,
    }
