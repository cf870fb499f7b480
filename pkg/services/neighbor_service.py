"""
TIVG Pipeline Services Module - Neighbor Service
================================================

Второй этап кластеризации: точный kNN внутри каждого родительского
кластера, граф взаимных соседей и перечисление "дочерних" кластеров -
групп размера g, где все участники входят в top-k друг друга.

Группы могут пересекаться: один узел допускается в нескольких группах.

Author: TIVG Team
License: MIT
"""

from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import networkx as nx
import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from config import NeighborConfig
from errors import DataValidationError
from models import ChildCluster, FeatureStore
from services.clustering_service import UNASSIGNED
from services.feature_service import FeatureService


@dataclass(frozen=True)
class NeighborLists:
    """
    Списки top-k соседей внутри родительских кластеров.

    Attributes:
        topk: Соседи каждого узла по возрастанию (расстояние, id).
        parent_of: Родительский кластер каждого узла из ``topk``.
        clamped: Кластеры, где k уменьшено до size-1: id -> фактическое k.
    """

    topk: Dict[int, Tuple[int, ...]]
    parent_of: Dict[int, int]
    clamped: Dict[int, int]


def _cluster_topk(
    members: np.ndarray,
    rows: np.ndarray,
    k: int
) -> Dict[int, Tuple[int, ...]]:
    """Точный top-k одного кластера; ничьи по меньшему node_id."""
    distances = 1.0 - rows @ rows.T
    k_eff = min(k, members.size - 1)
    lists: Dict[int, Tuple[int, ...]] = {}
    for position, node in enumerate(members.tolist()):
        order = np.lexsort((members, distances[position]))
        order = order[order != position][:k_eff]
        lists[node] = tuple(members[order].tolist())
    return lists


def _enumerate_cliques(
    nodes: Sequence[int],
    adjacency: Dict[int, frozenset],
    g: int
) -> List[Tuple[int, ...]]:
    """Все клики размера g; расширение только узлами с большим id."""
    found: List[Tuple[int, ...]] = []

    def extend(clique: List[int], candidates: List[int]) -> None:
        if len(clique) == g:
            found.append(tuple(clique))
            return
        for index, node in enumerate(candidates):
            rest = [other for other in candidates[index + 1:] if other in adjacency[node]]
            if len(clique) + 1 + len(rest) >= g:
                extend(clique + [node], rest)

    for node in sorted(nodes):
        higher = sorted(other for other in adjacency[node] if other > node)
        if 1 + len(higher) >= g:
            extend([node], higher)
    return found


class NeighborService:
    """
    Сервис второго этапа кластеризации.

    Методы:
        knn_within_cluster: Точный kNN внутри родительских кластеров
        mutual_graph: Граф взаимных top-k соседей
        find_child_clusters: Все клики размера g
        limit_memberships: Ограничить число групп на узел
        membership_histogram: Сколько групп у каждого узла
    """

    @staticmethod
    def knn_within_cluster(
        store: FeatureStore,
        parent_assignments: np.ndarray,
        config: NeighborConfig,
        workers: int = 1
    ) -> NeighborLists:
        """
        Точный поиск k ближайших соседей внутри каждого родительского кластера.

        Args:
            store: Нормированные признаки.
            parent_assignments: Родительский кластер каждого узла.
            config: Параметры k и g.
            workers: Число потоков; на результат не влияет.

        Returns:
            NeighborLists: Списки соседей; сам узел исключён, в кластере из
            одного узла список пуст.

        Raises:
            DataValidationError: Признаки не нормированы или длина назначений
                не совпадает с числом узлов.
        """
        parents = np.asarray(parent_assignments, dtype=np.int64)
        if parents.shape[0] != store.n:
            raise DataValidationError(
                f"назначений {parents.shape[0]}, а узлов {store.n}"
            )
        if not FeatureService.is_normalized(store):
            raise DataValidationError("для kNN строки признаков должны быть нормированы")

        cluster_ids = np.unique(parents[parents != UNASSIGNED]).tolist()
        members_by_cluster = [np.flatnonzero(parents == cluster) for cluster in cluster_ids]
        results = Parallel(n_jobs=workers, backend="threading")(
            delayed(_cluster_topk)(members, store.rows(members), config.k)
            for members in members_by_cluster
        )

        topk: Dict[int, Tuple[int, ...]] = {}
        parent_of: Dict[int, int] = {}
        clamped: Dict[int, int] = {}
        # Слияние по возрастанию id кластера
        for cluster, members, lists in zip(cluster_ids, members_by_cluster, results):
            if members.size - 1 < config.k:
                clamped[cluster] = int(members.size - 1)
            for node in members.tolist():
                topk[node] = lists[node]
                parent_of[node] = cluster

        if clamped:
            logger.warning(
                f"k={config.k} уменьшено в {len(clamped)} малых кластерах "
                f"(до size-1)"
            )
        logger.info(f"kNN: {len(cluster_ids)} кластеров, {len(topk)} узлов")
        return NeighborLists(topk=topk, parent_of=parent_of, clamped=clamped)

    @staticmethod
    def mutual_graph(lists: NeighborLists) -> nx.Graph:
        """
        Строит граф взаимных соседей: i~j, если j в top-k(i) и i в top-k(j).

        Узлы графа несут атрибут ``parent``.

        Returns:
            nx.Graph: Симметричный граф без петель.
        """
        graph = nx.Graph()
        for node in sorted(lists.topk):
            graph.add_node(node, parent=lists.parent_of.get(node, UNASSIGNED))

        neighbor_sets = {node: frozenset(neighbors) for node, neighbors in lists.topk.items()}
        for node in sorted(lists.topk):
            for other in lists.topk[node]:
                if other > node and node in neighbor_sets.get(other, frozenset()):
                    graph.add_edge(node, other)

        logger.info(
            f"Граф взаимных соседей: {graph.number_of_nodes()} узлов, "
            f"{graph.number_of_edges()} рёбер"
        )
        return graph

    @staticmethod
    def find_child_clusters(
        mutual_graph: nx.Graph,
        g: int,
        workers: int = 1
    ) -> List[ChildCluster]:
        """
        Перечисляет все клики размера g графа взаимных соседей.

        Args:
            mutual_graph: Граф с атрибутом ``parent`` у узлов.
            g: Размер группы (пресет paper: 4).
            workers: Число потоков (по родительским кластерам).

        Returns:
            List[ChildCluster]: Каждая клика один раз, участники по
            возрастанию, список в лексикографическом порядке; cluster_id -
            позиция в списке.

        Raises:
            DataValidationError: Клика охватывает разные родительские кластеры.

        Example:
            >>> groups = NeighborService.find_child_clusters(nx.complete_graph(5), 4)
            >>> len(groups)
            5
        """
        adjacency = {
            node: frozenset(mutual_graph.neighbors(node)) for node in mutual_graph.nodes
        }
        parent_attr = {
            node: data.get("parent", UNASSIGNED)
            for node, data in mutual_graph.nodes(data=True)
        }

        by_parent: Dict[int, List[int]] = {}
        for node, parent in parent_attr.items():
            by_parent.setdefault(parent, []).append(node)

        parent_ids = sorted(by_parent)
        results = Parallel(n_jobs=workers, backend="threading")(
            delayed(_enumerate_cliques)(by_parent[parent], adjacency, g)
            for parent in parent_ids
        )

        cliques = sorted(clique for group in results for clique in group)
        child_clusters: List[ChildCluster] = []
        for cluster_id, members in enumerate(cliques):
            parents = {parent_attr[node] for node in members}
            if len(parents) != 1:
                raise DataValidationError(
                    "группа охватывает разные родительские кластеры",
                    item_id=members[0],
                )
            child_clusters.append(
                ChildCluster(cluster_id=cluster_id, parent_id=parents.pop(), members=members)
            )

        logger.info(f"🔍 Найдено дочерних кластеров: {len(child_clusters)} (g={g})")
        return child_clusters

    @staticmethod
    def limit_memberships(
        child_clusters: List[ChildCluster],
        max_memberships: int
    ) -> List[ChildCluster]:
        """
        Оставляет группы жадно в порядке вывода, пока ни один узел не
        превышает ``max_memberships`` групп; номера групп уплотняются.
        """
        counts: Counter = Counter()
        kept: List[ChildCluster] = []
        for cluster in child_clusters:
            if all(counts[node] < max_memberships for node in cluster.members):
                counts.update(cluster.members)
                kept.append(
                    ChildCluster(
                        cluster_id=len(kept),
                        parent_id=cluster.parent_id,
                        members=cluster.members,
                    )
                )
        logger.info(
            f"Ограничение членства {max_memberships}: групп {len(child_clusters)} -> "
            f"{len(kept)}"
        )
        return kept

    @staticmethod
    def membership_histogram(child_clusters: List[ChildCluster]) -> Dict[int, int]:
        """Число групп, в которые входит каждый узел."""
        counts: Counter = Counter()
        for cluster in child_clusters:
            counts.update(cluster.members)
        return dict(counts)
