"""
TIVG Pipeline - Модуль доменных моделей.

Этот модуль содержит типы данных конвейера: узлы-патчи, рёбра графа
сходства, родительские и дочерние кластеры, положительные пары, триплеты,
хранилище признаков, разметку синтетического мира и модель вложений.

Все типы неизменяемы по соглашению: после построения граф и хранилище
безопасно читать из нескольких потоков.

Модуль соответствует стандартам PEP8 и PEP257.

Example:
    Ребро между двумя узлами одного дочернего кластера::

        from models import Edge, EdgeKind
        edge = Edge(kind=EdgeKind.INTER, a=1, b=2, child_ids=(0,))

Author: TIVG Team
License: MIT
Version: 1.0.0
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataValidationError


# =============================================================================
# ПЕРЕЧИСЛЕНИЯ
# =============================================================================

class EdgeKind(str, Enum):
    """Тип ребра графа сходства."""

    INTER = "inter"  # разные экземпляры, один дочерний кластер
    INTRA = "intra"  # один экземпляр, один трек


class Relation(str, Enum):
    """Происхождение положительной пары."""

    INTER = "inter"
    TRANS_A_PRIME_B = "trans_inter_a_prime_b"
    TRANS_A_B_PRIME = "trans_inter_a_b_prime"
    TRANS_A_PRIME_B_PRIME = "trans_inter_a_prime_b_prime"
    INTRA = "intra"
    ORDERING = "ordering"  # (A, A', B'): только триплеты, не пара


# =============================================================================
# УЗЛЫ И МЕТАДАННЫЕ
# =============================================================================

@dataclass(frozen=True)
class PatchNode:
    """
    Один найденный патч объекта.

    Attributes:
        node_id: Плотный индекс 0..n-1, совпадает со строкой матрицы признаков.
        video_id: Идентификатор видео.
        track_id: Идентификатор трека.
        frame_index: Номер кадра внутри видео.
        feature: Вектор признаков (может отсутствовать, если граф загружен
            без матрицы признаков).
    """

    node_id: int
    video_id: str
    track_id: str
    frame_index: int
    feature: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.node_id < 0:
            raise DataValidationError("node_id должен быть >= 0", item_id=self.node_id)
        if self.frame_index < 0:
            raise DataValidationError(
                "frame_index должен быть >= 0", item_id=self.node_id
            )


@dataclass(frozen=True)
class NodeMeta:
    """
    Метаданные всех узлов, выровненные со строками FeatureStore.

    Attributes:
        nodes: Узлы без признаков, ``nodes[i].node_id == i``.
    """

    nodes: Tuple[PatchNode, ...]

    def __len__(self) -> int:
        return len(self.nodes)

    def validate(self, n: int) -> None:
        """
        Проверяет согласованность с матрицей признаков.

        Args:
            n: Число строк в FeatureStore.

        Raises:
            DataValidationError: Число записей или порядок id не совпадают.
        """
        if len(self.nodes) != n:
            raise DataValidationError(
                f"метаданных {len(self.nodes)} записей, а строк признаков {n}"
            )
        for index, node in enumerate(self.nodes):
            if node.node_id != index:
                raise DataValidationError(
                    "node_id должны идти плотно 0..n-1 в порядке строк",
                    item_id=node.node_id,
                    row=index,
                )


@dataclass(frozen=True)
class FeatureStore:
    """
    Матрица признаков n x d; строка i - признак узла i.

    Attributes:
        data: Матрица float32, только для чтения.
    """

    data: np.ndarray

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def d(self) -> int:
        return int(self.data.shape[1])

    def rows(self, node_ids: Sequence[int]) -> np.ndarray:
        """Строки признаков для списка узлов (в float64 для вычислений)."""
        return self.data[np.asarray(node_ids, dtype=np.int64)].astype(np.float64)


# =============================================================================
# РЁБРА И КЛАСТЕРЫ
# =============================================================================

@dataclass(frozen=True)
class Edge:
    """
    Неориентированное ребро графа, хранится с ``a < b``.

    Attributes:
        kind: INTER или INTRA.
        a: Меньший id узла.
        b: Больший id узла.
        child_ids: Для INTER - все дочерние кластеры, порождающие ребро.
        track_id: Для INTRA - трек, которому принадлежат оба узла.
    """

    kind: EdgeKind
    a: int
    b: int
    child_ids: Tuple[int, ...] = ()
    track_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise DataValidationError("петля в ребре", item_id=self.a)
        if self.a > self.b:
            raise DataValidationError(
                f"ребро должно храниться с a < b, получено ({self.a}, {self.b})",
                item_id=self.a,
            )
        if self.kind is EdgeKind.INTER and (not self.child_ids or self.track_id):
            raise DataValidationError(
                "inter-ребро должно происходить из дочернего кластера", item_id=self.a
            )
        if self.kind is EdgeKind.INTRA and (self.child_ids or self.track_id is None):
            raise DataValidationError(
                "intra-ребро должно происходить из трека", item_id=self.a
            )

    @property
    def key(self) -> Tuple[str, int, int]:
        """Ключ дедупликации: тип и концы ребра."""
        return (self.kind.value, self.a, self.b)


@dataclass(frozen=True)
class ParentCluster:
    """
    Родительский кластер после прореживания.

    Attributes:
        cluster_id: Плотный индекс после прореживания.
        members: Узлы кластера.
        centroid: Центроид единичной нормы.
    """

    cluster_id: int
    members: FrozenSet[int]
    centroid: np.ndarray = field(compare=False, repr=False)


@dataclass(frozen=True, order=True)
class ChildCluster:
    """
    Группа из g взаимных top-k соседей внутри одного родительского кластера.

    Attributes:
        cluster_id: Порядковый номер группы в детерминированном выводе.
        parent_id: Родительский кластер всех участников.
        members: Отсортированные id участников.
    """

    cluster_id: int
    parent_id: int
    members: Tuple[int, ...]


# =============================================================================
# ГРАФ СХОДСТВА
# =============================================================================

@dataclass
class AffinityGraph:
    """
    Граф с inter- и intra-рёбрами и аннотациями кластеров.

    После построения граф не изменяется; индексы смежности строятся лениво.

    Attributes:
        nodes: Узлы в порядке node_id.
        edges: Рёбра, отсортированные по (тип, a, b), без повторов.
        parent_of: Родительский кластер узла (нет ключа у удалённых узлов).
        child_clusters: Дочерние кластеры в порядке cluster_id.
        dim: Размерность признаков набора данных.
    """

    nodes: List[PatchNode]
    edges: List[Edge]
    parent_of: Dict[int, int]
    child_clusters: List[ChildCluster]
    dim: int

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def inter_edges(self) -> List[Edge]:
        return [edge for edge in self.edges if edge.kind is EdgeKind.INTER]

    def intra_edges(self) -> List[Edge]:
        return [edge for edge in self.edges if edge.kind is EdgeKind.INTRA]

    @cached_property
    def intra_adjacency(self) -> Dict[int, FrozenSet[int]]:
        """Соседи каждого узла по intra-рёбрам."""
        adjacency: Dict[int, set] = {}
        for edge in self.intra_edges():
            adjacency.setdefault(edge.a, set()).add(edge.b)
            adjacency.setdefault(edge.b, set()).add(edge.a)
        return {node: frozenset(partners) for node, partners in adjacency.items()}

    @cached_property
    def edge_keys(self) -> FrozenSet[Tuple[str, int, int]]:
        return frozenset(edge.key for edge in self.edges)

    def has_edge(self, kind: EdgeKind, u: int, v: int) -> bool:
        """Проверка ребра, не зависящая от порядка концов."""
        a, b = (u, v) if u < v else (v, u)
        return (kind.value, a, b) in self.edge_keys

    def structurally_equal(self, other: "AffinityGraph") -> bool:
        """
        Сравнивает структуру графа (без векторов признаков).

        Returns:
            bool: True если совпадают узлы, рёбра, родители, группы и размерность.
        """
        return (
            self.dim == other.dim
            and self.nodes == other.nodes
            and self.edges == other.edges
            and self.parent_of == other.parent_of
            and self.child_clusters == other.child_clusters
        )

    def __repr__(self) -> str:
        """Строковое представление графа."""
        return (
            f"<AffinityGraph(nodes={len(self.nodes)}, edges={len(self.edges)}, "
            f"children={len(self.child_clusters)})>"
        )


# =============================================================================
# ПАРЫ И ТРИПЛЕТЫ
# =============================================================================

@dataclass(frozen=True, order=True)
class PositivePair:
    """
    Положительная пара, хранится с ``a < b``.

    Attributes:
        a: Меньший id.
        b: Больший id.
        relation: Как получена пара.
    """

    a: int
    b: int
    relation: Relation

    def __post_init__(self) -> None:
        if self.a >= self.b:
            raise DataValidationError(
                f"пара должна храниться с a < b, получено ({self.a}, {self.b})",
                item_id=self.a,
            )

    @classmethod
    def of(cls, u: int, v: int, relation: Relation) -> "PositivePair":
        """Создаёт пару, упорядочивая концы."""
        if u == v:
            raise DataValidationError("пара из одного узла", item_id=u)
        return cls(min(u, v), max(u, v), relation)


@dataclass(frozen=True)
class PairDataset:
    """
    Итоговый перемешанный набор пар.

    Attributes:
        pairs: Пары в порядке обучения.
        n_transitive: Сколько пар получено из графа (inter + транзитивные).
        n_intra: Сколько добавлено выбранных intra-пар.
    """

    pairs: Tuple[PositivePair, ...]
    n_transitive: int
    n_intra: int

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class Triplet:
    """
    Триплет (X, X+, X-) для функции ранжирования.

    Attributes:
        anchor: Якорь X.
        positive: Позитив X+.
        negative: Негатив X- из другого родительского кластера.
        relation: Отношение исходной пары.
    """

    anchor: int
    positive: int
    negative: int
    relation: Relation

    def __post_init__(self) -> None:
        if len({self.anchor, self.positive, self.negative}) != 3:
            raise DataValidationError(
                "узлы триплета должны быть попарно различны", item_id=self.anchor
            )


# =============================================================================
# РАЗМЕТКА И МОДЕЛЬ
# =============================================================================

@dataclass(frozen=True)
class GroundTruth:
    """
    Истинные метки синтетического мира.

    Attributes:
        category: Категория каждого узла.
        instance: Экземпляр каждого узла (глобальный индекс).
        view: Ракурс каждого узла.
    """

    category: np.ndarray
    instance: np.ndarray
    view: np.ndarray

    def __len__(self) -> int:
        return int(self.category.shape[0])


@dataclass
class EmbeddingModel:
    """
    Отображение F(.) из признаков в пространство вложений.

    Attributes:
        architecture: ``linear`` (W1, b1) или ``one_hidden`` (W1, b1, W2, b2).
        weights: Именованные массивы float64.
        d_in: Размерность входа.
        d_out: Размерность вложения.
        seed: Зерно инициализации.
        iteration: Сколько шагов SGD уже сделано.
    """

    architecture: str
    weights: Dict[str, np.ndarray]
    d_in: int
    d_out: int
    seed: int = 0
    iteration: int = 0

    def copy(self) -> "EmbeddingModel":
        """Глубокая копия весов."""
        return EmbeddingModel(
            architecture=self.architecture,
            weights={name: value.copy() for name, value in self.weights.items()},
            d_in=self.d_in,
            d_out=self.d_out,
            seed=self.seed,
            iteration=self.iteration,
        )

    def __repr__(self) -> str:
        """Строковое представление модели."""
        return (
            f"<EmbeddingModel({self.architecture}, {self.d_in}->{self.d_out}, "
            f"iteration={self.iteration})>"
        )
