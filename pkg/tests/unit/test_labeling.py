"""Unit tests for label fusion and graph regularization."""

import itertools
import math

import numpy as np
import pytest

from spmatch.domain.errors import DomainError
from spmatch.domain.models import FeatureConfig, FusionParams
from spmatch.domain.types import AnnField, FeatureTable, LabelFusionMap, Labeling, LabelMap
from spmatch.services.decompose import import_decomposition, superpixel_labels_from_pixels
from spmatch.services.labeling import (
    alpha_expansion,
    argmax_label,
    expand_to_pixels,
    export_probability_maps,
    fusion_weight,
    label_fusion,
    labeling_energy,
    load_probabilities,
    pairwise_edges,
    regularize,
)
from spmatch.services.spm import ExemplarLibrary, FeaturedImage
from spmatch.services.superpatch import compute_feature

pytestmark = pytest.mark.unit

INF = float("inf")


def featured_from(rows, labels=None):
    decomp = import_decomposition(LabelMap(np.array(rows)))
    return FeaturedImage(decomp, FeatureTable(np.zeros((decomp.size, 1)), FeatureConfig()), labels=labels)


def ann_field(superpixel_ids, distances, image_ids=None):
    sp = np.atleast_2d(np.array(superpixel_ids, dtype=np.int64))
    d = np.atleast_2d(np.array(distances, dtype=np.float64))
    img = np.zeros_like(sp) if image_ids is None else np.atleast_2d(np.array(image_ids))
    n, k = d.shape
    return AnnField(img, sp, d, d.T[:, None, :], np.zeros((k, 1, n), dtype=np.int64))


@pytest.fixture
def strip_library():
    """One exemplar of three 1-pixel superpixels at x = 0, 1, 2 labeled 0, 1, 1."""
    return ExemplarLibrary([featured_from([[0, 1, 2]], labels=[0, 1, 1])])


@pytest.fixture
def point_test():
    """A one-superpixel test image at the origin."""
    return featured_from([[0]])


class TestFusionWeight:
    """Test the per-match fusion weight."""

    def test_best_match_no_prior(self):
        """Test D = min D with beta = inf gives exp(1 - 1/alpha^2)."""
        params = FusionParams(alpha=2.0, beta=INF)
        assert fusion_weight(1.0, 1.0, (0, 0), (5, 5), params) == pytest.approx(math.exp(0.75), rel=1e-9)

    def test_same_position(self):
        """Test that c_i = c_j drops the spatial term for finite beta."""
        params = FusionParams(alpha=2.0, beta=4.0)
        assert fusion_weight(1.0, 1.0, (3, 3), (3, 3), params) == pytest.approx(math.exp(0.75), rel=1e-9)

    def test_spatial_term(self):
        """Test |c_i - c_j| / beta^2 in the exponent."""
        params = FusionParams(alpha=2.0, beta=4.0)
        expected = math.exp(1.0 - (2.0 / (4.0 * (1.0 + params.epsilon)) + 5.0 / 16.0))
        assert fusion_weight(2.0, 1.0, (0, 0), (3, 4), params) == pytest.approx(expected, rel=1e-12)

    def test_always_positive(self):
        """Test that weights are positive even for huge distances."""
        assert fusion_weight(1e3, 1e-3, (0, 0), (100, 100), FusionParams()) >= 0.0


class TestLabelFusion:
    """Test label probabilities."""

    def test_single_match_one_hot(self, strip_library, point_test):
        """Test that k = 1 gives a one-hot row."""
        fusion = label_fusion(ann_field([1], [0.4]), point_test, strip_library, FusionParams(num_labels=3))
        np.testing.assert_allclose(fusion.probabilities, [[0.0, 1.0, 0.0]])

    def test_equal_weights_split(self, point_test):
        """Test that two equal-weight votes for different labels split evenly."""
        library = ExemplarLibrary([featured_from([[0, 1]], labels=[0, 1])])
        fusion = label_fusion(ann_field([0, 1], [0.3, 0.3]), point_test, library, FusionParams(beta=INF, num_labels=2))
        np.testing.assert_allclose(fusion.probabilities, [[0.5, 0.5]], atol=1e-12)

    def test_hand_computed(self, strip_library, point_test):
        """Test three matches against a direct evaluation of the weights."""
        params = FusionParams(alpha=2.0, beta=4.0, num_labels=2)
        distances = [1.0, 2.0, 4.0]
        h2 = 4.0 * (1.0 + params.epsilon)
        omega = [math.exp(1.0 - (d / h2 + s / 16.0)) for d, s in zip(distances, [0.0, 1.0, 2.0])]
        expected = [omega[0] / sum(omega), (omega[1] + omega[2]) / sum(omega)]

        fusion = label_fusion(ann_field([0, 1, 2], distances), point_test, strip_library, params)
        np.testing.assert_allclose(fusion.probabilities[0], expected, rtol=1e-9)

    def test_infinite_beta_drops_position(self, strip_library, point_test):
        """Test that beta = inf equals a run where every match sits at the test barycenter."""
        params = FusionParams(alpha=2.0, beta=INF, num_labels=2)
        distances = [1.0, 2.0, 4.0]
        omega = [math.exp(1.0 - d / (4.0 * (1.0 + params.epsilon))) for d in distances]
        fusion = label_fusion(ann_field([0, 1, 2], distances), point_test, strip_library, params)
        np.testing.assert_allclose(
            fusion.probabilities[0], [omega[0] / sum(omega), (omega[1] + omega[2]) / sum(omega)], rtol=1e-9
        )

    def test_rows_sum_to_one(self, rng):
        """Test normalization on random matches, including underflowing weights."""
        library = ExemplarLibrary([featured_from([list(range(10))], labels=rng.integers(0, 3, 10))])
        test = featured_from([list(range(6))])
        ids = rng.integers(0, 10, size=(6, 5))
        distances = rng.uniform(0.0, 1e4, size=(6, 5))
        fusion = label_fusion(ann_field(ids, distances), test, library, FusionParams(epsilon=1e-9))
        np.testing.assert_allclose(fusion.probabilities.sum(axis=1), 1.0, atol=1e-12)

    def test_scale_invariant_ranking(self, strip_library, point_test):
        """Test that scaling all distances keeps the label ranking."""
        params = FusionParams(alpha=2.0, beta=INF, num_labels=2, epsilon=1e-12)
        a = label_fusion(ann_field([0, 1, 2], [1.0, 2.0, 4.0]), point_test, strip_library, params)
        b = label_fusion(ann_field([0, 1, 2], [10.0, 20.0, 40.0]), point_test, strip_library, params)
        np.testing.assert_allclose(a.probabilities, b.probabilities, rtol=1e-9)

    def test_unlabeled_library(self, point_test):
        """Test that every exemplar needs labels."""
        library = ExemplarLibrary([featured_from([[0, 1]])])
        with pytest.raises(DomainError):
            label_fusion(ann_field([0], [1.0]), point_test, library, FusionParams())

    def test_label_out_of_range(self, point_test):
        """Test that labels must be below num_labels."""
        library = ExemplarLibrary([featured_from([[0, 1]], labels=[0, 3])])
        with pytest.raises(DomainError):
            label_fusion(ann_field([0], [1.0]), point_test, library, FusionParams(num_labels=3))


class TestArgmax:
    """Test argmax labeling."""

    @pytest.mark.parametrize(
        "row,label",
        [([0.2, 0.5, 0.3], 1), ([0.5, 0.5], 0), ([1 / 3, 1 / 3, 1 / 3], 0)],
    )
    def test_ties_to_lowest(self, row, label):
        """Test the most probable label with ties to the lowest."""
        assert argmax_label(LabelFusionMap(np.array([row]))).labels.tolist() == [label]


class TestEnergy:
    """Test the regularization graph and energy."""

    def test_edge_weights(self):
        """Test exp(-d / gamma) on adjacency edges."""
        decomp = import_decomposition(LabelMap(np.array([[0, 1, 2]])))
        features = FeatureTable(np.array([[0.0], [1.0], [1.0]]), FeatureConfig())
        edges, weights = pairwise_edges(decomp, features, gamma=0.5)
        np.testing.assert_array_equal(edges, [[0, 1], [1, 2]])
        np.testing.assert_allclose(weights, [math.exp(-2.0), 1.0])

    def test_superpatch_neighborhood(self):
        """Test that the superpatch graph adds pairs within the radius."""
        decomp = import_decomposition(LabelMap(np.array([[0, 1, 2, 3]])))
        features = FeatureTable(np.zeros((4, 1)), FeatureConfig())
        edges, _ = pairwise_edges(decomp, features, 1.0, neighborhood="superpatch", radius=2.0)
        np.testing.assert_array_equal(edges, [[0, 1], [0, 2], [1, 2], [1, 3], [2, 3]])

    def test_invalid(self):
        """Test gamma and neighborhood validation."""
        decomp = import_decomposition(LabelMap(np.array([[0, 1]])))
        features = FeatureTable(np.zeros((2, 1)), FeatureConfig())
        with pytest.raises(DomainError):
            pairwise_edges(decomp, features, 0.0)
        with pytest.raises(DomainError):
            pairwise_edges(decomp, features, 1.0, neighborhood="grid")

    def test_energy(self):
        """Test data plus cut terms, each edge counted once."""
        probabilities = np.array([[0.9, 0.1], [0.2, 0.8]])
        edges = np.array([[0, 1]])
        assert labeling_energy(np.array([0, 1]), probabilities, edges, np.array([0.5])) == pytest.approx(0.8)
        assert labeling_energy(np.array([0, 0]), probabilities, edges, np.array([0.5])) == pytest.approx(0.9)


def exhaustive_minimum(probabilities, edges, weights):
    n, m = probabilities.shape
    labelings = np.array(list(itertools.product(range(m), repeat=n)))
    data = np.sum(1.0 - probabilities[np.arange(n), labelings], axis=1)
    cuts = labelings[:, edges[:, 0]] != labelings[:, edges[:, 1]]
    return float(np.min(data + cuts @ weights))


class TestAlphaExpansion:
    """Test alpha-expansion minimization."""

    def test_consistent_one_hot_unchanged(self, block_decomposition):
        """Test that an already optimal labeling is kept with the same energy."""
        decomp = block_decomposition(4, 4, 2)
        probabilities = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        features = FeatureTable(np.array([[0.0], [0.0], [5.0], [5.0]]), FeatureConfig())
        labeling = regularize(LabelFusionMap(probabilities), decomp, features, gamma=0.5)
        assert labeling.labels.tolist() == [0, 0, 1, 1]
        assert labeling.energy_trace[-1] == pytest.approx(labeling.energy_trace[0])

    def test_star_flip(self):
        """Test that an unsure center surrounded by one confident label joins it."""
        probabilities = np.array([[0.6, 0.4]] + [[0.0, 1.0]] * 4)
        edges = np.array([[0, 1], [0, 2], [0, 3], [0, 4]])
        weights = np.ones(4)
        labels, trace = alpha_expansion(probabilities, edges, weights, np.array([0, 1, 1, 1, 1]))
        assert labels.tolist() == [1, 1, 1, 1, 1]
        assert trace[0] == pytest.approx(4.4)
        assert trace[-1] == pytest.approx(0.6)

    @pytest.mark.parametrize("shape", [(1, 5), (1, 10), (2, 3), (2, 5), (3, 3)])
    def test_reaches_exhaustive_optimum(self, rng, shape):
        """Test that small 3-label problems on superpixel grids end at the exhaustive optimum."""
        rows, cols = shape
        decomp = import_decomposition(LabelMap(np.arange(rows * cols).reshape(rows, cols)))
        exact = 0
        instances = 60
        for _ in range(instances):
            features = FeatureTable(rng.random((decomp.size, 3)), FeatureConfig())
            edges, weights = pairwise_edges(decomp, features, 0.5)
            probabilities = rng.dirichlet(np.ones(3), size=decomp.size)
            initial = np.argmax(probabilities, axis=1)

            labels, trace = alpha_expansion(probabilities, edges, weights, initial)
            assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
            assert labeling_energy(labels, probabilities, edges, weights) == pytest.approx(trace[-1])

            optimum = exhaustive_minimum(probabilities, edges, weights)
            assert trace[-1] >= optimum - 1e-9
            assert trace[-1] <= 2.0 * optimum + 1e-9
            exact += abs(trace[-1] - optimum) < 1e-9
        assert exact / instances >= 0.95

    def test_dense_graphs_within_factor_two(self, rng):
        """Test the factor-2 bound on random dense graphs."""
        for _ in range(50):
            n = int(rng.integers(3, 9))
            pairs = np.array([(p, q) for p in range(n) for q in range(p + 1, n)])
            edges = pairs[rng.random(len(pairs)) < 0.4]
            if edges.size == 0:
                edges = pairs[:1]
            weights = rng.uniform(0.0, 1.0, size=len(edges))
            probabilities = rng.dirichlet(np.ones(3), size=n)

            _, trace = alpha_expansion(probabilities, edges, weights, np.argmax(probabilities, axis=1))
            optimum = exhaustive_minimum(probabilities, edges, weights)
            assert optimum - 1e-9 <= trace[-1] <= 2.0 * optimum + 1e-9

    def test_regularize_never_increases(self, block_decomposition, texture, rng):
        """Test that the trace starts at the argmax energy and never rises."""
        decomp = block_decomposition(16, 16, 2)
        features = compute_feature(decomp, texture(16), FeatureConfig())
        fusion = LabelFusionMap(rng.dirichlet(np.ones(3), size=decomp.size))
        labeling = regularize(fusion, decomp, features, gamma=0.5)
        edges, weights = pairwise_edges(decomp, features, 0.5)
        initial = argmax_label(fusion).labels
        probabilities = np.asarray(fusion.probabilities)
        assert labeling.energy_trace[0] == pytest.approx(labeling_energy(initial, probabilities, edges, weights))
        assert all(b <= a + 1e-12 for a, b in zip(labeling.energy_trace, labeling.energy_trace[1:]))
        assert len(labeling.energy_trace) <= 11

    def test_label_count_mismatch(self, block_decomposition):
        """Test that num_labels must match the fusion map."""
        decomp = block_decomposition(2, 2, 1)
        features = FeatureTable(np.zeros((4, 1)), FeatureConfig())
        fusion = LabelFusionMap(np.full((4, 2), 0.5))
        with pytest.raises(DomainError):
            regularize(fusion, decomp, features, num_labels=3)


class TestPixels:
    """Test expansion to pixels and probability export."""

    def test_two_superpixels(self):
        """Test that pixels take their superpixel's label."""
        decomp = import_decomposition(LabelMap(np.array([[0, 0, 1], [0, 1, 1]])))
        labelmap = expand_to_pixels(Labeling(np.array([0, 1])), decomp)
        np.testing.assert_array_equal(labelmap.labels, decomp.labelmap)

    def test_single_superpixel(self):
        """Test a constant map for K = 1."""
        decomp = import_decomposition(LabelMap(np.zeros((3, 3), dtype=int)))
        np.testing.assert_array_equal(expand_to_pixels(Labeling(np.array([2])), decomp).labels, 2)

    def test_majority_recovers_labeling(self, block_decomposition, rng):
        """Test that a majority vote over the expanded map gives the labeling back."""
        decomp = block_decomposition(12, 12, 3)
        labels = rng.integers(0, 4, decomp.size)
        expanded = expand_to_pixels(Labeling(labels), decomp)
        np.testing.assert_array_equal(superpixel_labels_from_pixels(expanded, decomp), labels)

    def test_size_mismatch(self, block_decomposition):
        """Test that the labeling must cover every superpixel."""
        with pytest.raises(DomainError):
            expand_to_pixels(Labeling(np.array([0])), block_decomposition(2, 2, 1))

    def test_probability_export(self, tmp_path, block_decomposition, rng):
        """Test per-label PNGs and the raw CSV."""
        decomp = block_decomposition(4, 4, 2)
        fusion = LabelFusionMap(rng.dirichlet(np.ones(3), size=4))
        written = export_probability_maps(fusion, decomp, tmp_path)
        assert [p.name for p in written] == ["prob_0.png", "prob_1.png", "prob_2.png", "probabilities.csv"]
        np.testing.assert_array_equal(load_probabilities(tmp_path / "probabilities.csv").probabilities, fusion.probabilities)
