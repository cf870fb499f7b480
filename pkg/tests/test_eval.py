"""
Тесты оценки: чистота, precision@k, упорядочение четвёрок.
"""

import math

import numpy as np
import pytest

from config import build_pipeline_config
from errors import DataValidationError
from models import ChildCluster, GroundTruth
from services.eval_service import EvalService, ModeResult
from services.feature_service import FeatureService
from storage import read_csv, read_json


def _truth(categories: int, instances: int, views: int) -> GroundTruth:
    """Разметка в порядке синтетического мира: ((c * I) + i) * V + v."""
    grid = np.indices((categories, instances, views)).reshape(3, -1)
    return GroundTruth(
        category=grid[0],
        instance=grid[0] * instances + grid[1],
        view=grid[2],
    )


# -------------------------------------------------------------------------------------------------
# Чистота и членство
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestPurity:
    """Чистота дочерних кластеров."""

    def test_single_category_clusters(self):
        truth = _truth(2, 2, 2)
        clusters = [ChildCluster(0, 0, (0, 1, 2, 3)), ChildCluster(1, 0, (4, 5, 6, 7))]
        result = EvalService.purity(clusters, truth)
        assert result.strict == 1.0
        assert result.majority == 1.0
        assert result.n_clusters == 2

    def test_mixed_cluster(self):
        truth = _truth(2, 2, 2)
        clusters = [ChildCluster(0, 0, (0, 1, 2, 3)), ChildCluster(1, 0, (2, 3, 4, 5))]
        result = EvalService.purity(clusters, truth)
        assert result.strict == 0.5
        assert result.majority == pytest.approx(0.75)

    def test_no_clusters(self):
        assert EvalService.purity([], _truth(1, 1, 2)).n_clusters == 0

    def test_unlabeled_member(self):
        with pytest.raises(DataValidationError, match="id=9"):
            EvalService.purity([ChildCluster(0, 0, (0, 9))], _truth(1, 2, 2))

    def test_membership_stats(self):
        clusters = [ChildCluster(0, 0, (0, 1, 2)), ChildCluster(1, 0, (1, 2, 3))]
        stats = EvalService.membership_stats(clusters, {node: 0 for node in range(6)})
        assert stats == {
            "assigned_nodes": 6,
            "nodes_in_groups": 4,
            "nodes_in_one_group": 2,
            "single_membership_fraction": 0.5,
            "max_memberships": 2,
        }


# -------------------------------------------------------------------------------------------------
# precision@k
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestRetrievalPrecision:
    """Поиск соседей по косинусу."""

    @pytest.fixture
    def truth(self):
        return _truth(3, 3, 2)

    def test_one_hot_embeddings_are_perfect(self, truth):
        embeddings = np.eye(3)[truth.category]
        for protocol, k in (("standard", 5), ("cross_view", 3), ("cross_instance", 2)):
            assert EvalService.retrieval_precision(embeddings, truth, k, protocol) == 1.0

    def test_single_direction_scores_by_tie_order(self, truth):
        # Все сходства равны, соседи - галерея по возрастанию номера
        embeddings = np.ones((len(truth), 4))
        precision = EvalService.retrieval_precision(embeddings, truth, 1, "standard")
        expected = np.mean([
            truth.category[query] == truth.category[0 if query != 0 else 1]
            for query in range(len(truth))
        ])
        assert precision == pytest.approx(expected)

    def test_infeasible_k(self, truth):
        with pytest.raises(DataValidationError, match="k=3"):
            EvalService.retrieval_precision(np.eye(3)[truth.category], truth, 3, "cross_instance")

    def test_unknown_protocol(self, truth):
        with pytest.raises(DataValidationError, match="протокол"):
            EvalService.retrieval_precision(np.eye(3)[truth.category], truth, 1, "nearest")

    def test_zero_embedding(self, truth):
        embeddings = np.eye(3)[truth.category]
        embeddings[4] = 0.0
        with pytest.raises(DataValidationError, match="row=4"):
            EvalService.retrieval_precision(embeddings, truth, 1, "standard")

    def test_worker_count_does_not_change_precision(self, rng):
        truth = _truth(10, 60, 2)
        embeddings = rng.standard_normal((len(truth), 8)) + np.eye(10, 8)[truth.category]
        single = EvalService.retrieval_precision(embeddings, truth, 5, "cross_instance", workers=1)
        threaded = EvalService.retrieval_precision(embeddings, truth, 5, "cross_instance", workers=4)
        assert single == threaded

    def test_retrieval_table(self, truth):
        table = EvalService.retrieval_table(np.eye(3)[truth.category], truth, [1, 2], "cross_instance")
        assert table == {1: 1.0, 2: 1.0}


# -------------------------------------------------------------------------------------------------
# Четвёрки
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestQuadruples:
    """Четвёрки (A, A', B, B') и доля упорядочения."""

    @pytest.fixture
    def graph(self, make_graph):
        return make_graph(4, clusters=[(0, 2)], tracks=[(0, 1), (2, 3)])

    def test_both_directions_are_listed(self, graph):
        assert EvalService.quadruples(graph).tolist() == [[0, 1, 2, 3], [2, 3, 0, 1]]

    def test_identical_views_are_always_ordered(self, graph):
        embeddings = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        assert EvalService.quadruple_ordering_rate(embeddings, graph, 100, seed=0) == 1.0

    def test_swapped_views_are_never_ordered(self, graph):
        embeddings = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        assert EvalService.quadruple_ordering_rate(embeddings, graph, 100, seed=0) == 0.0

    def test_tie_is_not_ordered(self, graph):
        embeddings = np.ones((4, 3))
        assert EvalService.quadruple_ordering_rate(embeddings, graph, 10, seed=0) == 0.0

    def test_graph_without_quadruples(self, make_graph):
        graph = make_graph(3, clusters=[(0, 2)], tracks=[(0, 1)])
        assert EvalService.quadruples(graph).shape == (0, 4)
        with pytest.raises(DataValidationError, match="нет четвёрок"):
            EvalService.quadruple_ordering_rate(np.eye(3), graph, 10, seed=0)


# -------------------------------------------------------------------------------------------------
# Отчёты
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestReports:
    """Таблица режимов."""

    def test_modes_csv(self, tmp_path):
        modes = [
            ModeResult("inter_only", 10, 0.25, {1: 0.5, 5: 0.4}, None),
            ModeResult("transitive", 40, 0.125, {1: 0.75, 5: 0.6}, 0.9),
        ]
        EvalService.save_modes_csv(modes, [1, 5], tmp_path / "modes.csv")
        rows = read_csv(tmp_path / "modes.csv")
        assert [row["mode"] for row in rows] == ["inter_only", "transitive"]
        assert rows[0]["quadruple_ordering_rate"] == ""
        assert rows[1]["precision_at_1"] == "0.75"
        assert rows[1]["n_pairs"] == "40"

    def test_mode_without_steps_has_no_loss(self, tmp_path, make_graph):
        graph = make_graph(
            4, clusters=[(0, 2)], tracks=[(0, 1), (2, 3)], parent_of={0: 0, 1: 1, 2: 0, 3: 1}
        )
        store = FeatureService.from_array(np.eye(4))
        config = build_pipeline_config(
            preset="desk", overrides=["train.iterations=0", "train.d_out=3"]
        )
        _, n_pairs, final_loss = EvalService.train_mode("transitive", graph, store, config)
        assert n_pairs > 0
        assert final_loss is None

        EvalService.save_report({"final_loss": final_loss}, tmp_path / "report.json")
        assert read_json(tmp_path / "report.json") == {"final_loss": None}

    def test_report_rejects_nan(self, tmp_path):
        with pytest.raises(ValueError):
            EvalService.save_report({"final_loss": float("nan")}, tmp_path / "report.json")


# -------------------------------------------------------------------------------------------------
# Уровень случайности
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestChanceLevel:
    """Метрики на случайных данных дают ожидаемый уровень угадывания."""

    @pytest.fixture
    def chain_graph(self, make_graph):
        """100 треков из двух узлов, соседние треки связаны inter-ребром."""
        return make_graph(
            200,
            clusters=[(2 * i, 2 * i + 2) for i in range(99)],
            tracks=[(2 * i, 2 * i + 1) for i in range(100)],
        )

    def test_random_cliques_purity(self, rng):
        truth = _truth(4, 50, 1)
        draws = 20000
        clusters = [
            ChildCluster(cluster_id=i, parent_id=0, members=tuple(sorted(members)))
            for i, members in enumerate(
                rng.choice(200, size=4, replace=False).tolist() for _ in range(draws)
            )
        ]
        # все 4 участника из одной из 4 категорий по 50
        expected = 4 * math.comb(50, 4) / math.comb(200, 4)
        tolerance = 5 * math.sqrt(expected * (1 - expected) / draws)
        assert EvalService.purity(clusters, truth).strict == pytest.approx(expected, abs=tolerance)

    @pytest.mark.parametrize(
        "protocol, expected",
        [("standard", 39 / 399), ("cross_view", 20 / 200), ("cross_instance", 19 / 199)],
    )
    def test_random_embeddings_precision(self, protocol, expected):
        truth = _truth(10, 20, 2)
        scores = [
            EvalService.retrieval_precision(
                np.random.default_rng(seed).normal(size=(400, 16)), truth, 5, protocol
            )
            for seed in range(5)
        ]
        assert np.mean(scores) == pytest.approx(expected, abs=0.025)

    def test_random_embeddings_ordering(self, chain_graph):
        rates = [
            EvalService.quadruple_ordering_rate(
                np.random.default_rng(seed).normal(size=(200, 8)), chain_graph, 500, seed=seed
            )
            for seed in range(20)
        ]
        assert np.mean(rates) == pytest.approx(0.5, abs=0.05)

    def test_rotation_does_not_change_metrics(self, rng, chain_graph):
        truth = _truth(10, 10, 2)
        embeddings = rng.normal(size=(200, 12))
        rotation, _ = np.linalg.qr(rng.normal(size=(12, 12)))
        rotated = embeddings @ rotation
        for protocol in ("standard", "cross_instance"):
            assert EvalService.retrieval_precision(rotated, truth, 5, protocol) == pytest.approx(
                EvalService.retrieval_precision(embeddings, truth, 5, protocol)
            )
        assert EvalService.quadruple_ordering_rate(
            rotated, chain_graph, 300, seed=1
        ) == EvalService.quadruple_ordering_rate(embeddings, chain_graph, 300, seed=1)
