"""Unit tests for manifests and the decomposition and feature caches."""

import json

import numpy as np
import pytest

from spmatch.domain.errors import FormatError, StaleCacheError
from spmatch.domain.models import DecomposeParams, FeatureConfig, RunConfig
from spmatch.services import library as library_service
from spmatch.services.decompose import export_decomposition, sidecar_path
from spmatch.services.imaging import load_image, save_image
from spmatch.services.library import (
    decomposition_cache_path,
    feature_cache_key,
    feature_cache_path,
    load_featured_image,
    load_library,
    load_manifest,
    obtain_decomposition,
)

pytestmark = pytest.mark.unit


@pytest.fixture
def small_config():
    """Run configuration with few superpixels."""
    return RunConfig(decompose=DecomposeParams(superpixels=16))


@pytest.fixture
def counting_slic(monkeypatch):
    """Count calls to the SLIC decomposer."""
    calls = []
    original = library_service.slic_decompose

    def wrapper(*args, **kwargs):
        calls.append(args[1])
        return original(*args, **kwargs)

    monkeypatch.setattr(library_service, "slic_decompose", wrapper)
    return calls


class TestManifest:
    """Test manifest parsing."""

    def test_load(self, workspace):
        """Test entries with images and labels."""
        entries = load_manifest(workspace["manifest"])
        assert [e.image for e in entries] == ["lib1.png", "lib2.png"]
        assert entries[0].labels == "lib1_gt.png"
        assert entries[0].image_paths == ["lib1.png"]

    @pytest.mark.parametrize(
        "document",
        [
            '[{"labels": "a.png"}]',
            '[{"image": "a.png", "extra": 1}]',
            '[{"image": []}]',
            '{"image": "a.png"}',
            "[{",
        ],
    )
    def test_invalid(self, tmp_path, document):
        """Test that malformed manifests are format errors."""
        path = tmp_path / "bad.json"
        path.write_text(document)
        with pytest.raises(FormatError):
            load_manifest(path)


class TestDecompositionCache:
    """Test cached SLIC decompositions."""

    def test_reused(self, workspace, counting_slic):
        """Test that a second request reads the cache."""
        path = workspace["test"]
        image = load_image(path)
        params = DecomposeParams(superpixels=16)
        first = obtain_decomposition(image, path, params)
        second = obtain_decomposition(image, path, params)

        assert counting_slic == [16]
        assert decomposition_cache_path(path).name == "test.sp.png"
        np.testing.assert_array_equal(first.labelmap, second.labelmap)

        sidecar = json.loads(sidecar_path(decomposition_cache_path(path)).read_text())
        assert sidecar["params"]["superpixels"] == 16

    def test_recomputed_when_params_change(self, workspace, counting_slic):
        """Test that a different superpixel count bypasses the cache."""
        path = workspace["test"]
        image = load_image(path)
        obtain_decomposition(image, path, DecomposeParams(superpixels=16))
        obtain_decomposition(image, path, DecomposeParams(superpixels=9))
        assert counting_slic == [16, 9]

    def test_disabled(self, workspace, counting_slic):
        """Test that no files are written without caching."""
        path = workspace["test"]
        obtain_decomposition(load_image(path), path, DecomposeParams(superpixels=16), cache=False)
        assert not decomposition_cache_path(path).exists()

    def test_explicit(self, workspace, block_decomposition, counting_slic):
        """Test that an explicit decomposition file wins."""
        explicit, _ = export_decomposition(block_decomposition(32, 32, 8), workspace["root"] / "given.png")
        path = workspace["test"]
        decomp = obtain_decomposition(load_image(path), path, DecomposeParams(), explicit=explicit)
        assert decomp.size == 16
        assert counting_slic == []

    def test_user_decomposition_kept(self, workspace, block_decomposition, counting_slic):
        """Test that a label image without recorded parameters is reused and left untouched."""
        path = workspace["test"]
        user_png, user_json = export_decomposition(block_decomposition(32, 32, 16), decomposition_cache_path(path))
        before = (user_png.read_bytes(), user_json.read_bytes())

        decomp = obtain_decomposition(load_image(path), path, DecomposeParams(superpixels=64))

        assert decomp.size == 4
        assert counting_slic == []
        assert (user_png.read_bytes(), user_json.read_bytes()) == before

    def test_user_label_image_without_sidecar(self, workspace, block_decomposition, counting_slic):
        """Test that a bare label image at the cache path counts as user-made."""
        path = workspace["test"]
        user_png, user_json = export_decomposition(block_decomposition(32, 32, 16), decomposition_cache_path(path))
        user_json.unlink()

        decomp = obtain_decomposition(load_image(path), path, DecomposeParams(superpixels=64))

        assert decomp.size == 4
        assert counting_slic == []
        assert not user_json.exists()


class TestFeatureCache:
    """Test content-keyed feature caches."""

    def test_path_depends_on_decomposition(self, workspace, block_decomposition):
        """Test that two decompositions of one image get separate cache files."""
        path = workspace["test"]
        coarse = feature_cache_path(path, block_decomposition(32, 32, 16))
        fine = feature_cache_path(path, block_decomposition(32, 32, 8))
        assert coarse != fine
        assert coarse.parent == path.parent
        assert coarse.name.startswith("test.") and coarse.name.endswith(".feat.npz")
        assert coarse == feature_cache_path(path, block_decomposition(32, 32, 16))

    def test_two_decompositions_of_one_image(self, workspace, block_decomposition, small_config):
        """Test that caching features for a second decomposition leaves the first cache valid."""
        root = workspace["root"]
        a, _ = export_decomposition(block_decomposition(32, 32, 16), root / "a.png")
        b, _ = export_decomposition(block_decomposition(32, 32, 8), root / "b.png")

        first = load_featured_image([workspace["test"]], small_config, decomposition=a)
        second = load_featured_image([workspace["test"]], small_config, decomposition=b)
        again = load_featured_image([workspace["test"]], small_config, decomposition=a)

        assert (first.size, second.size) == (4, 16)
        np.testing.assert_array_equal(first.features.values, again.features.values)
        assert len(list(root.glob("test.*.feat.npz"))) == 2

    def test_key_depends_on_config(self, workspace, block_decomposition):
        """Test that the key changes with the feature configuration."""
        decomp = block_decomposition(32, 32, 8)
        paths = [workspace["test"]]
        a = feature_cache_key(paths, decomp, FeatureConfig(kind="cumulative-histogram", bins=8))
        b = feature_cache_key(paths, decomp, FeatureConfig(kind="cumulative-histogram", bins=16))
        assert a != b
        assert a == feature_cache_key(paths, decomp, FeatureConfig(kind="cumulative-histogram", bins=8))

    def test_written_and_read(self, workspace, small_config):
        """Test that a second load returns the cached table."""
        first = load_featured_image([workspace["test"]], small_config)
        assert feature_cache_path(workspace["test"], first.decomposition).exists()
        second = load_featured_image([workspace["test"]], small_config)
        np.testing.assert_array_equal(first.features.values, second.features.values)

    def test_stale_after_image_change(self, workspace, small_config, texture):
        """Test that changed image bytes invalidate the cache until rebuilt."""
        load_featured_image([workspace["test"]], small_config)
        save_image(texture(32, seed=9), workspace["test"])

        with pytest.raises(StaleCacheError):
            load_featured_image([workspace["test"]], small_config)

        rebuilt = load_featured_image([workspace["test"]], small_config, rebuild=True)
        again = load_featured_image([workspace["test"]], small_config)
        np.testing.assert_array_equal(rebuilt.features.values, again.features.values)

    def test_stale_after_config_change(self, workspace, small_config):
        """Test that a different feature configuration invalidates the cache."""
        load_featured_image([workspace["test"]], small_config)
        other = small_config.model_copy(update={"feature": FeatureConfig(kind="cumulative-histogram", bins=4)})
        with pytest.raises(StaleCacheError):
            load_featured_image([workspace["test"]], other)


class TestLoadLibrary:
    """Test library construction from a manifest."""

    def test_labeled(self, workspace, small_config):
        """Test that labeled entries carry per-superpixel labels."""
        library = load_library(workspace["manifest"], small_config)
        assert len(library) == 2
        assert library.is_labeled
        for entry in library.entries:
            assert entry.labels.shape == (entry.size,)
            assert set(np.unique(entry.labels)) <= {0, 1}
        assert feature_cache_path(workspace["root"] / "lib1.png", library.entries[0].decomposition).exists()

    def test_unlabeled(self, workspace, small_config):
        """Test that entries without labels leave the library unlabeled."""
        library = load_library(workspace["unlabeled"], small_config)
        assert len(library) == 1
        assert not library.is_labeled

    def test_labels_follow_majority(self, workspace, small_config):
        """Test that a left/right split maps to superpixel labels on each side."""
        image = load_featured_image([workspace["test"]], small_config, labels=workspace["truth"])
        xs = np.asarray(image.decomposition.barycenters)[:, 0]
        assert np.all(image.labels[xs < 8] == 0)
        assert np.all(image.labels[xs > 24] == 1)
