"""
TIVG Pipeline Services Module - Graph Service
=============================================

Построение графа сходства с двумя типами рёбер и его хранение.

* inter-рёбра: полная клика внутри каждого дочернего кластера;
* intra-рёбра: цепочка последовательных кадров одного трека.

Формат файла графа (JSON-lines)::

    {"version":1,"n_nodes":N,"dim":D}                  заголовок
    {"node":0,"video":"v0","track":"t0","frame":0}     узел
    {"node":0,"parent":3}                              родительский кластер
    {"child":0,"parent":3,"members":[0,4,7,9]}         дочерний кластер
    {"kind":"inter","a":0,"b":4,"child":[0]}           inter-ребро
    {"kind":"intra","a":0,"b":1,"track":"t0"}          intra-ребро

Author: TIVG Team
License: MIT
"""

from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from loguru import logger

from errors import DataValidationError, ParseError
from models import AffinityGraph, ChildCluster, Edge, EdgeKind, FeatureStore, PatchNode
from services.clustering_service import UNASSIGNED
from services.feature_service import FeatureService
from storage import iter_jsonl, require_field, write_jsonl

# Версия формата файла графа
GRAPH_FORMAT_VERSION = 1

ParentAssignments = Union[np.ndarray, Sequence[int], Mapping[int, int]]


def _parent_map(parent_assignments: ParentAssignments, n_nodes: int) -> Dict[int, int]:
    """Приводит назначения к словарю node -> parent без удалённых узлов."""
    if isinstance(parent_assignments, Mapping):
        items = list(parent_assignments.items())
    else:
        items = list(enumerate(np.asarray(parent_assignments, dtype=np.int64).tolist()))

    parent_of: Dict[int, int] = {}
    for node, parent in items:
        node, parent = int(node), int(parent)
        if not 0 <= node < n_nodes:
            raise DataValidationError("назначение ссылается на несуществующий узел", item_id=node)
        if parent != UNASSIGNED:
            if parent < 0:
                raise DataValidationError(f"отрицательный кластер {parent}", item_id=node)
            parent_of[node] = parent
    return dict(sorted(parent_of.items()))


class GraphService:
    """
    Сервис графа сходства.

    Методы:
        build_graph: Собрать граф из кластеров и треков
        tracks_from_nodes: Сгруппировать узлы по трекам
        intra_partners: Соседи узла по intra-рёбрам
        save_graph / load_graph: Хранение графа в JSON-lines
    """

    @staticmethod
    def tracks_from_nodes(nodes: Sequence[PatchNode]) -> List[List[int]]:
        """
        Группирует узлы по track_id.

        Returns:
            List[List[int]]: Треки в порядке первого узла, внутри трека
            узлы по (frame_index, node_id).
        """
        groups: Dict[str, List[PatchNode]] = {}
        for node in nodes:
            groups.setdefault(node.track_id, []).append(node)
        tracks = [
            [node.node_id for node in sorted(group, key=lambda n: (n.frame_index, n.node_id))]
            for group in groups.values()
        ]
        tracks.sort(key=min)
        return tracks

    @staticmethod
    def build_graph(
        nodes: Sequence[PatchNode],
        parent_assignments: ParentAssignments,
        child_clusters: Sequence[ChildCluster],
        tracks: Sequence[Sequence[int]],
        dim: Optional[int] = None
    ) -> AffinityGraph:
        """
        Строит граф сходства.

        Args:
            nodes: Узлы с плотными id 0..n-1.
            parent_assignments: Родительский кластер каждого узла (массив с
                UNASSIGNED или словарь).
            child_clusters: Дочерние кластеры.
            tracks: Списки узлов одного трека в порядке кадров.
            dim: Размерность признаков; по умолчанию берётся из узлов.

        Returns:
            AffinityGraph: Граф, рёбра без повторов; сначала inter, затем
            intra, каждые по (a, b).

        Raises:
            DataValidationError: Несогласованные id (в сообщении указан id).

        Example:
            >>> cluster = ChildCluster(cluster_id=0, parent_id=0, members=(1, 2, 3, 4))
            >>> graph = GraphService.build_graph(nodes, parents, [cluster], [])
            >>> len(graph.inter_edges())
            6
        """
        nodes = list(nodes)
        n = len(nodes)
        for index, node in enumerate(nodes):
            if node.node_id != index:
                raise DataValidationError(
                    "node_id должны идти плотно 0..n-1", item_id=node.node_id, row=index
                )

        if dim is None:
            dim = int(nodes[0].feature.shape[0]) if nodes and nodes[0].feature is not None else 0
        for node in nodes:
            if node.feature is not None and node.feature.shape[0] != dim:
                raise DataValidationError(
                    f"длина признака {node.feature.shape[0]} != {dim}", item_id=node.node_id
                )

        parent_of = _parent_map(parent_assignments, n)

        # Inter-рёбра: ключ (a, b) -> все порождающие дочерние кластеры
        inter_origins: Dict[Tuple[int, int], Set[int]] = {}
        for cluster in child_clusters:
            if len(set(cluster.members)) != len(cluster.members):
                raise DataValidationError(
                    "повтор узла в дочернем кластере", item_id=cluster.cluster_id
                )
            for member in cluster.members:
                if not 0 <= member < n:
                    raise DataValidationError(
                        f"дочерний кластер {cluster.cluster_id} ссылается на "
                        f"несуществующий узел",
                        item_id=member,
                    )
                if parent_of.get(member) != cluster.parent_id:
                    raise DataValidationError(
                        f"узел не принадлежит родительскому кластеру {cluster.parent_id} "
                        f"дочернего кластера {cluster.cluster_id}",
                        item_id=member,
                    )
            for u, v in combinations(sorted(cluster.members), 2):
                inter_origins.setdefault((u, v), set()).add(cluster.cluster_id)

        # Intra-рёбра: последовательные узлы трека
        intra_tracks: Dict[Tuple[int, int], str] = {}
        for track in tracks:
            for member in track:
                if not 0 <= member < n:
                    raise DataValidationError("трек ссылается на несуществующий узел", item_id=member)
            track_ids = {nodes[member].track_id for member in track}
            if len(track_ids) > 1:
                raise DataValidationError(
                    f"узлы трека имеют разные track_id {sorted(track_ids)}", item_id=track[0]
                )
            for u, v in zip(track, track[1:]):
                if u == v:
                    raise DataValidationError("повтор узла в треке", item_id=u)
                intra_tracks[(min(u, v), max(u, v))] = nodes[u].track_id

        edges: List[Edge] = [
            Edge(kind=EdgeKind.INTER, a=a, b=b, child_ids=tuple(sorted(origins)))
            for (a, b), origins in sorted(inter_origins.items())
        ]
        edges.extend(
            Edge(kind=EdgeKind.INTRA, a=a, b=b, track_id=track_id)
            for (a, b), track_id in sorted(intra_tracks.items())
        )

        graph = AffinityGraph(
            nodes=nodes,
            edges=edges,
            parent_of=parent_of,
            child_clusters=sorted(child_clusters, key=lambda cluster: cluster.cluster_id),
            dim=dim,
        )
        logger.info(
            f"Граф построен: {n} узлов, inter {len(inter_origins)}, "
            f"intra {len(intra_tracks)}, дочерних кластеров {len(child_clusters)}"
        )
        return graph

    @staticmethod
    def intra_partners(graph: AffinityGraph, node_id: int) -> Set[int]:
        """
        Соседи узла по intra-рёбрам (только прямые рёбра).

        Raises:
            DataValidationError: Неизвестный id.
        """
        if not 0 <= node_id < graph.n_nodes:
            raise DataValidationError("неизвестный узел", item_id=node_id)
        return set(graph.intra_adjacency.get(node_id, frozenset()))

    # =========================================================================
    # ХРАНЕНИЕ
    # =========================================================================

    @staticmethod
    def graph_records(graph: AffinityGraph):
        """Записи файла графа в каноническом порядке."""
        yield {"version": GRAPH_FORMAT_VERSION, "n_nodes": graph.n_nodes, "dim": graph.dim}
        yield from FeatureService.meta_records(graph.nodes)
        for node, parent in sorted(graph.parent_of.items()):
            yield {"node": node, "parent": parent}
        for cluster in graph.child_clusters:
            yield {
                "child": cluster.cluster_id,
                "parent": cluster.parent_id,
                "members": list(cluster.members),
            }
        for edge in graph.edges:
            if edge.kind is EdgeKind.INTER:
                yield {"kind": "inter", "a": edge.a, "b": edge.b, "child": list(edge.child_ids)}
            else:
                yield {"kind": "intra", "a": edge.a, "b": edge.b, "track": edge.track_id}

    @staticmethod
    def save_graph(graph: AffinityGraph, path: Union[str, Path]) -> None:
        """Сохраняет граф в JSON-lines (без векторов признаков)."""
        count = write_jsonl(path, GraphService.graph_records(graph))
        logger.info(f"💾 Граф сохранён: {path} ({count} записей)")

    @staticmethod
    def load_graph(
        path: Union[str, Path],
        features: Optional[FeatureStore] = None
    ) -> AffinityGraph:
        """
        Загружает граф.

        Args:
            path: Файл графа.
            features: Если задано, строки признаков прикрепляются к узлам.

        Returns:
            AffinityGraph: Структурно равный сохранённому граф.

        Raises:
            ParseError: Повреждённый файл (с номером строки).
            DataValidationError: Признаки не соответствуют заголовку.
        """
        records = iter_jsonl(path)
        try:
            line, header = next(records)
        except StopIteration:
            raise ParseError(f"{path}: пустой файл графа, нет заголовка", line=1)

        version = require_field(header, "version", int, line)
        if version != GRAPH_FORMAT_VERSION:
            raise ParseError(f"неподдерживаемая версия графа {version}", line=line)
        n_nodes = require_field(header, "n_nodes", int, line)
        dim = require_field(header, "dim", int, line)

        nodes: List[PatchNode] = []
        parent_of: Dict[int, int] = {}
        child_clusters: List[ChildCluster] = []
        edges: List[Edge] = []

        for line, record in records:
            try:
                if "kind" in record:
                    edge = GraphService._parse_edge(record, line)
                    _check_nodes((edge.a, edge.b), n_nodes, "ребро", line)
                    edges.append(edge)
                elif "child" in record:
                    members = _int_list(require_field(record, "members", list, line), "members", line)
                    _check_nodes(members, n_nodes, "дочерний кластер", line)
                    child_clusters.append(
                        ChildCluster(
                            cluster_id=require_field(record, "child", int, line),
                            parent_id=require_field(record, "parent", int, line),
                            members=tuple(members),
                        )
                    )
                elif "parent" in record:
                    node = require_field(record, "node", int, line)
                    _check_nodes((node,), n_nodes, "родитель", line)
                    parent_of[node] = require_field(record, "parent", int, line)
                elif "video" in record:
                    nodes.append(FeatureService.parse_meta_record(record, line))
                else:
                    raise ParseError(f"неизвестный тип записи: {sorted(record)}", line=line)
            except ParseError:
                raise
            except DataValidationError as exc:
                raise ParseError(str(exc), line=line) from exc

        if len(nodes) != n_nodes:
            raise ParseError(f"{path}: в заголовке {n_nodes} узлов, прочитано {len(nodes)}")
        for index, node in enumerate(nodes):
            if node.node_id != index:
                raise ParseError(f"{path}: узлы не идут по порядку 0..n-1 (узел {node.node_id})")

        if features is not None:
            if features.n != n_nodes or features.d != dim:
                raise DataValidationError(
                    f"признаки {features.n}x{features.d} не соответствуют графу {n_nodes}x{dim}"
                )
            nodes = [
                PatchNode(
                    node_id=node.node_id,
                    video_id=node.video_id,
                    track_id=node.track_id,
                    frame_index=node.frame_index,
                    feature=features.data[node.node_id],
                )
                for node in nodes
            ]

        graph = AffinityGraph(
            nodes=nodes,
            edges=edges,
            parent_of=parent_of,
            child_clusters=child_clusters,
            dim=dim,
        )
        logger.info(f"Граф загружен: {path} {graph!r}")
        return graph

    @staticmethod
    def _parse_edge(record: dict, line: int) -> Edge:
        kind = require_field(record, "kind", str, line)
        a = require_field(record, "a", int, line)
        b = require_field(record, "b", int, line)
        if kind == EdgeKind.INTER.value:
            child_ids = _int_list(require_field(record, "child", list, line), "child", line)
            return Edge(kind=EdgeKind.INTER, a=a, b=b, child_ids=tuple(child_ids))
        if kind == EdgeKind.INTRA.value:
            track = require_field(record, "track", (str, int), line)
            return Edge(kind=EdgeKind.INTRA, a=a, b=b, track_id=str(track))
        raise ParseError(f"неизвестный тип ребра '{kind}'", line=line)


def _int_list(values: list, key: str, line: int) -> List[int]:
    if not all(isinstance(value, int) and not isinstance(value, bool) for value in values):
        raise ParseError(f"поле '{key}' должно содержать целые числа", line=line)
    return list(values)


def _check_nodes(node_ids: Iterable[int], n_nodes: int, what: str, line: int) -> None:
    for node in node_ids:
        if not 0 <= node < n_nodes:
            raise ParseError(f"{what} ссылается на узел {node} вне 0..{n_nodes - 1}", line=line)
