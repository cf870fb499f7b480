"""
TIVG Pipeline Services Module - Transitivity Service
====================================================

Сервис вывода положительных пар по транзитивности графа.

Для inter-ребра (A, B) и intra-рёбер (A, A'), (B, B') кроме самой
пары (A, B) выводятся (A, B'), (A', B) и (A', B'). Глубина ровно одно
inter-ребро и не больше одного intra-шага с каждой стороны.

К выведенным парам добавляются случайно выбранные intra-пары так,
чтобы их доля в наборе была равна ``intra_ratio``.

Author: TIVG Team
License: MIT
"""

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from config import PairGenConfig
from errors import ConfigurationError, ParseError
from models import AffinityGraph, Edge, PairDataset, PositivePair, Relation
from storage import iter_jsonl, require_field, write_jsonl

# Число inter-рёбер в одной порции параллельной генерации
EDGE_CHUNK = 4096

# Независимые потоки генератора внутри этапа пар
STREAM_INTRA = 0
STREAM_SHUFFLE = 1

PAIR_MODES = ("transitive", "intra_only", "inter_only", "union")


def _relation(x: int, y: int, a: int, b: int) -> Relation:
    if x == a and y == b:
        return Relation.INTER
    if y == b:
        return Relation.TRANS_A_PRIME_B
    if x == a:
        return Relation.TRANS_A_B_PRIME
    return Relation.TRANS_A_PRIME_B_PRIME


def _closure_chunk(
    edges: Sequence[Edge],
    adjacency: Dict[int, frozenset]
) -> List[Tuple[int, int, Relation]]:
    """Декартово замыкание для порции inter-рёбер (порядок рёбер сохраняется)."""
    triples: List[Tuple[int, int, Relation]] = []
    for edge in edges:
        left = [edge.a] + sorted(adjacency.get(edge.a, ()))
        right = [edge.b] + sorted(adjacency.get(edge.b, ()))
        for x in left:
            for y in right:
                if x != y:
                    triples.append((x, y, _relation(x, y, edge.a, edge.b)))
    return triples


class TransitivityService:
    """
    Сервис генерации положительных пар.

    Методы:
        transitive_pairs: Inter-пары и их транзитивное замыкание
        sample_intra_pairs: Равномерная выборка intra-рёбер с возвращением
        assemble_pairs: Объединение и детерминированное перемешивание
        build_pair_dataset: Набор пар для режима (полный или абляции)
    """

    @staticmethod
    def transitive_pairs(graph: AffinityGraph, workers: int = 1) -> List[PositivePair]:
        """
        Перечисляет inter-пары и все транзитивные комбинации.

        Для каждого inter-ребра берётся декартово произведение
        {A} + intra(A) на {B} + intra(B). Повторы удаляются, пара остаётся
        на месте первого появления; если пара сама является inter-ребром,
        её отношение INTER.

        Args:
            graph: Граф сходства.
            workers: Число потоков; на результат не влияет.

        Returns:
            List[PositivePair]: Пары в порядке inter-рёбер графа.

        Example:
            >>> # inter (A,B), intra (A,A'), (B,B')
            >>> pairs = TransitivityService.transitive_pairs(graph)
            >>> len(pairs)
            4
        """
        inter = graph.inter_edges()
        adjacency = graph.intra_adjacency
        chunks = [inter[start:start + EDGE_CHUNK] for start in range(0, len(inter), EDGE_CHUNK)]
        results = Parallel(n_jobs=workers, backend="threading")(
            delayed(_closure_chunk)(chunk, adjacency) for chunk in chunks
        )

        relations: Dict[Tuple[int, int], Relation] = {}
        for triples in results:
            for x, y, relation in triples:
                key = (min(x, y), max(x, y))
                if key not in relations:
                    relations[key] = relation
                elif relation is Relation.INTER:
                    relations[key] = relation

        pairs = [PositivePair(a, b, relation) for (a, b), relation in relations.items()]
        logger.info(
            f"🔗 Транзитивность: inter-рёбер {len(inter)} -> пар {len(pairs)} "
            f"{TransitivityService.relation_histogram(pairs)}"
        )
        return pairs

    @staticmethod
    def inter_pairs(graph: AffinityGraph) -> List[PositivePair]:
        """Только базовые пары inter-рёбер, без транзитивности."""
        return [PositivePair(edge.a, edge.b, Relation.INTER) for edge in graph.inter_edges()]

    @staticmethod
    def intra_count_for(n_transitive: int, intra_ratio: float) -> int:
        """
        Число intra-пар i, при котором i / (t + i) = ratio с точностью до пары.

        Example:
            >>> TransitivityService.intra_count_for(70, 0.3)
            30
        """
        if intra_ratio <= 0.0:
            return 0
        exact = intra_ratio * n_transitive / (1.0 - intra_ratio)
        return int(np.floor(exact + 0.5))

    @staticmethod
    def sample_intra_pairs(
        graph: AffinityGraph,
        config: PairGenConfig,
        target_count: int
    ) -> List[PositivePair]:
        """
        Равномерная выборка intra-рёбер с возвращением.

        Args:
            graph: Граф сходства.
            config: Зерно генератора.
            target_count: Сколько пар выбрать.

        Returns:
            List[PositivePair]: Пары с отношением INTRA (возможны повторы).

        Raises:
            ConfigurationError: target_count > 0, а intra-рёбер нет.
        """
        if target_count <= 0:
            return []
        intra = graph.intra_edges()
        if not intra:
            raise ConfigurationError(
                f"запрошено {target_count} intra-пар, но в графе нет intra-рёбер"
            )
        rng = np.random.default_rng([config.seed, STREAM_INTRA])
        picks = rng.integers(len(intra), size=target_count)
        return [PositivePair(intra[i].a, intra[i].b, Relation.INTRA) for i in picks.tolist()]

    @staticmethod
    def assemble_pairs(
        transitive: Sequence[PositivePair],
        intra_sampled: Sequence[PositivePair],
        config: PairGenConfig
    ) -> PairDataset:
        """
        Объединяет пары и перемешивает их по зерну.

        Returns:
            PairDataset: Перемешанный набор с числом пар каждого источника.
        """
        combined = list(transitive) + list(intra_sampled)
        rng = np.random.default_rng([config.seed, STREAM_SHUFFLE])
        order = rng.permutation(len(combined))
        pairs = tuple(combined[i] for i in order.tolist())
        return PairDataset(pairs=pairs, n_transitive=len(transitive), n_intra=len(intra_sampled))

    @staticmethod
    def build_pair_dataset(
        graph: AffinityGraph,
        config: PairGenConfig,
        mode: Optional[str] = None,
        workers: int = 1
    ) -> PairDataset:
        """
        Собирает набор пар для режима.

        Режимы:
            transitive: транзитивные пары + intra по ``intra_ratio``;
            intra_only: только intra-пары, общее число как у transitive;
            inter_only: только базовые inter-пары;
            union: базовые inter-пары + intra по ``intra_ratio``, без транзитивности.

        Args:
            graph: Граф сходства.
            config: Параметры генерации.
            mode: Режим; по умолчанию ``config.mode``.
            workers: Число потоков.

        Raises:
            ConfigurationError: Неизвестный режим или нет intra-рёбер.
        """
        mode = mode or config.mode
        if mode not in PAIR_MODES:
            raise ConfigurationError(f"неизвестный режим пар: {mode}")

        if mode == "inter_only":
            base: List[PositivePair] = TransitivityService.inter_pairs(graph)
            intra: List[PositivePair] = []
        elif mode == "union":
            base = TransitivityService.inter_pairs(graph)
            count = TransitivityService.intra_count_for(len(base), config.intra_ratio)
            intra = TransitivityService.sample_intra_pairs(graph, config, count)
        else:
            transitive = TransitivityService.transitive_pairs(graph, workers)
            count = TransitivityService.intra_count_for(len(transitive), config.intra_ratio)
            if mode == "transitive":
                base = transitive
                intra = TransitivityService.sample_intra_pairs(graph, config, count)
            else:
                base = []
                intra = TransitivityService.sample_intra_pairs(
                    graph, config, len(transitive) + count
                )

        dataset = TransitivityService.assemble_pairs(base, intra, config)
        logger.info(
            f"Набор пар ({mode}): {len(dataset)} = {dataset.n_transitive} из графа + "
            f"{dataset.n_intra} intra"
        )
        return dataset

    @staticmethod
    def relation_histogram(pairs: Iterable[PositivePair]) -> Dict[str, int]:
        """Число пар каждого отношения (в порядке перечисления, без ORDERING)."""
        counts = {relation.value: 0 for relation in Relation if relation is not Relation.ORDERING}
        for pair in pairs:
            counts[pair.relation.value] += 1
        return counts

    # =========================================================================
    # ФАЙЛ ПАР
    # =========================================================================

    @staticmethod
    def save_pairs(pairs: Iterable[PositivePair], path: Union[str, Path]) -> int:
        """Сохраняет пары как {a, b, relation}."""
        return write_jsonl(
            path,
            ({"a": pair.a, "b": pair.b, "relation": pair.relation.value} for pair in pairs),
        )

    @staticmethod
    def load_pairs(path: Union[str, Path]) -> List[PositivePair]:
        """
        Загружает пары.

        Raises:
            ParseError: Некорректная запись или неизвестное отношение.
        """
        pairs: List[PositivePair] = []
        for line, record in iter_jsonl(path):
            relation = parse_relation(require_field(record, "relation", str, line), line)
            if relation is Relation.ORDERING:
                raise ParseError("отношение ordering допустимо только в триплетах", line=line)
            a = require_field(record, "a", int, line)
            b = require_field(record, "b", int, line)
            if a >= b:
                raise ParseError(f"пара должна храниться с a < b: ({a}, {b})", line=line)
            pairs.append(PositivePair(a, b, relation))
        return pairs


def parse_relation(value: str, line: int) -> Relation:
    """Отношение пары по строковому значению."""
    try:
        return Relation(value)
    except ValueError:
        raise ParseError(f"неизвестное отношение '{value}'", line=line)
