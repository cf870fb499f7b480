"""
Тесты первого этапа кластеризации: сферический K-means и прореживание.
"""

import numpy as np
import pytest

from config import KMeansConfig, SynthConfig
from errors import ConfigurationError
from services.clustering_service import UNASSIGNED, ClusteringService
from services.feature_service import FeatureService
from services.synth_service import SynthService


def _unit_store(matrix):
    return FeatureService.l2_normalize(FeatureService.from_array(matrix))


def _same_partition(left: np.ndarray, right: np.ndarray) -> bool:
    """Совпадение разбиений с точностью до перестановки меток."""
    mapping = {}
    for a, b in zip(left.tolist(), right.tolist()):
        if mapping.setdefault(a, b) != b:
            return False
    return len(set(mapping.values())) == len(mapping)


# -------------------------------------------------------------------------------------------------
# K-means
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestKMeans:
    """Сферический K-means."""

    @pytest.mark.parametrize("dataset", range(20))
    def test_objective_never_increases(self, dataset):
        rng = np.random.default_rng(dataset)
        store = _unit_store(rng.standard_normal((300, 8)))
        result = ClusteringService.kmeans_fit(store, KMeansConfig(K=6, seed=dataset, tol=1e-12))
        trace = np.asarray(result.objective_trace)
        assert np.all(np.diff(trace) <= 1e-12)

    def test_n_equals_k(self, rng):
        store = _unit_store(rng.standard_normal((7, 5)))
        result = ClusteringService.kmeans_fit(store, KMeansConfig(K=7))
        assert sorted(result.assignments.tolist()) == list(range(7))
        assert result.objective_trace[-1] == pytest.approx(0.0, abs=1e-6)

    def test_single_cluster_is_mean_direction(self, rng):
        store = _unit_store(rng.standard_normal((50, 4)) + 2.0)
        result = ClusteringService.kmeans_fit(store, KMeansConfig(K=1))
        mean = store.data.astype(np.float64).sum(axis=0)
        np.testing.assert_allclose(result.centroids[0], mean / np.linalg.norm(mean), atol=1e-10)

    def test_antipodal_blobs(self, rng):
        direction = np.zeros(6)
        direction[0] = 1.0
        blob_a = direction + 0.1 * rng.standard_normal((50, 6))
        blob_b = -direction + 0.1 * rng.standard_normal((50, 6))
        store = _unit_store(np.vstack([blob_a, blob_b]))
        labels = np.repeat([0, 1], 50)
        result = ClusteringService.kmeans_fit(store, KMeansConfig(K=2, seed=11))
        assert _same_partition(result.assignments, labels)

    def test_recovers_synth_categories(self):
        config = SynthConfig(
            n_categories=5,
            instances_per_category=4,
            d_in=16,
            category_separation=1.0,
            instance_noise=0.0,
            view_distortion=0.0,
            seed=1,
        )
        store, _, truth = SynthService.generate(config)
        result = ClusteringService.kmeans_fit(store, KMeansConfig(K=5, seed=2))
        assert _same_partition(result.assignments, truth.category)

    def test_row_permutation_permutes_assignments(self, rng):
        points = _unit_store(rng.standard_normal((120, 5))).data
        init = points[:4].astype(np.float64)
        order = rng.permutation(120)
        base = ClusteringService.kmeans_fit(
            FeatureService.from_array(points), KMeansConfig(K=4), init_centroids=init
        )
        shuffled = ClusteringService.kmeans_fit(
            FeatureService.from_array(points[order]), KMeansConfig(K=4), init_centroids=init
        )
        np.testing.assert_array_equal(shuffled.assignments, base.assignments[order])

    def test_fewer_points_than_clusters(self, rng):
        store = _unit_store(rng.standard_normal((3, 4)))
        with pytest.raises(ConfigurationError, match="K=5"):
            ClusteringService.kmeans_fit(store, KMeansConfig(K=5))

    def test_empty_cluster_is_reseeded(self, rng):
        store = _unit_store(np.abs(rng.standard_normal((10, 3))))
        twin = np.vstack([store.data[0], store.data[0]]).astype(np.float64)
        result = ClusteringService.kmeans_fit(store, KMeansConfig(K=2), init_centroids=twin)
        assert result.reseed_events
        assert result.reseed_events[0].cluster_id == 1
        assert result.reseed_events[0].iteration == 1

    def test_worker_count_does_not_change_result(self, rng):
        store = _unit_store(rng.standard_normal((5000, 8)))
        config = KMeansConfig(K=10, seed=5)
        single = ClusteringService.kmeans_fit(store, config, workers=1)
        threaded = ClusteringService.kmeans_fit(store, config, workers=4)
        assert single.centroids.tobytes() == threaded.centroids.tobytes()
        np.testing.assert_array_equal(single.assignments, threaded.assignments)
        assert single.objective_trace == threaded.objective_trace


# -------------------------------------------------------------------------------------------------
# Прореживание
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestPruning:
    """Удаление мелких кластеров."""

    def test_all_clusters_survive(self):
        assignments = np.array([2, 2, 0, 0, 1, 1])
        pruned = ClusteringService.prune_clusters(assignments, 2)
        np.testing.assert_array_equal(pruned, assignments)

    def test_cluster_below_threshold_is_dropped(self):
        pruned = ClusteringService.prune_clusters(np.array([0, 0, 0, 1, 1]), 3)
        np.testing.assert_array_equal(pruned, [0, 0, 0, UNASSIGNED, UNASSIGNED])

    def test_reindexing_is_dense(self):
        pruned = ClusteringService.prune_clusters(np.array([0, 0, 1, 2, 2]), 2)
        np.testing.assert_array_equal(pruned, [0, 0, UNASSIGNED, 1, 1])

    def test_random_sizes_match_histogram(self, rng):
        assignments = rng.integers(0, 30, size=400)
        pruned = ClusteringService.prune_clusters(assignments, 14)
        sizes = np.bincount(assignments, minlength=30)
        for node, cluster in enumerate(assignments.tolist()):
            assert (pruned[node] != UNASSIGNED) == (sizes[cluster] >= 14)
        assert int(pruned.max()) + 1 == int(np.sum(sizes >= 14))

    def test_parent_clusters_have_unit_centroids(self, rng):
        store = _unit_store(rng.standard_normal((20, 3)))
        parents = ClusteringService.prune_clusters(np.repeat([0, 1], 10), 5)
        clusters = ClusteringService.parent_clusters(store, parents)
        assert [len(cluster.members) for cluster in clusters] == [10, 10]
        for cluster in clusters:
            assert np.linalg.norm(cluster.centroid) == pytest.approx(1.0)

    def test_assignments_round_trip(self, tmp_path):
        parents = np.array([0, UNASSIGNED, 1, 1, UNASSIGNED, 0])
        ClusteringService.save_assignments(parents, tmp_path / "parents.jsonl")
        loaded = ClusteringService.load_assignments(tmp_path / "parents.jsonl", 6)
        np.testing.assert_array_equal(loaded, parents)
