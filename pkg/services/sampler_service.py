"""
TIVG Pipeline Services Module - Sampler Service
===============================================

Сервис сэмплирования триплетов для функции ранжирования.

Каждая положительная пара мини-батча становится триплетом (X, X+, X-),
где негатив X- берётся равномерно из узлов других пар того же батча,
чей родительский кластер отличается от кластера якоря.

Если у какой-то пары нет допустимого негатива, состав батча
пересобирается (tenacity); после исчерпания попыток - ошибка.

Author: TIVG Team
License: MIT
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Union

import numpy as np
from loguru import logger
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from config import BatchConfig
from errors import BatchCompositionError, ConfigurationError, ParseError
from models import AffinityGraph, PositivePair, Relation, Triplet
from services.transitivity_service import parse_relation
from storage import iter_jsonl, require_field, write_jsonl


@dataclass(frozen=True)
class ResampleEvent:
    """Состав батча пересобран из-за пары без допустимого негатива."""

    epoch: int
    batch_index: int
    attempt: int


class _NegativePool:
    """Глобальный пул узлов с родительским кластером."""

    def __init__(self, parent_of: Mapping[int, int]) -> None:
        self.nodes = np.array(sorted(parent_of), dtype=np.int64)
        self.parents = np.array([parent_of[node] for node in self.nodes.tolist()], dtype=np.int64)

    def candidates(self, exclude_parent: Optional[int], anchor: int, positive: int) -> np.ndarray:
        mask = (self.nodes != anchor) & (self.nodes != positive)
        if exclude_parent is not None:
            mask &= self.parents != exclude_parent
        return self.nodes[mask]


class SamplerService:
    """
    Сервис триплетов.

    Методы:
        sample_triplets: Поток батчей триплетов
        ordering_triplets: Дополнительные триплеты (A, A', B')
        epochs_for: Сколько эпох нужно на заданное число итераций
        save_batches / load_batches: Файл триплетов
    """

    @staticmethod
    def _negative_for(
        anchor: int,
        positive: int,
        batch: Sequence[PositivePair],
        index: int,
        parent_of: Mapping[int, int],
        pool: _NegativePool,
        rng: np.random.Generator
    ) -> int:
        anchor_parent = parent_of.get(anchor)
        if anchor_parent is None or len(batch) == 1:
            # Якорь без кластера или батч из одной пары: глобальный пул
            exclude = anchor_parent if anchor_parent is not None else parent_of.get(positive)
            candidates = pool.candidates(exclude, anchor, positive)
        else:
            others = {
                node
                for position, pair in enumerate(batch)
                if position != index
                for node in (pair.a, pair.b)
            }
            candidates = np.array(
                sorted(
                    node for node in others
                    if node not in (anchor, positive)
                    and parent_of.get(node, anchor_parent) != anchor_parent
                ),
                dtype=np.int64,
            )
        if candidates.size == 0:
            raise BatchCompositionError(
                "нет негатива из другого родительского кластера", item_id=anchor
            )
        return int(candidates[rng.integers(candidates.size)])

    @staticmethod
    def _compose(
        batch: Sequence[PositivePair],
        parent_of: Mapping[int, int],
        pool: _NegativePool,
        rng: np.random.Generator
    ) -> List[Triplet]:
        swaps = rng.integers(0, 2, size=len(batch))
        triplets: List[Triplet] = []
        for index, (pair, swap) in enumerate(zip(batch, swaps.tolist())):
            anchor, positive = (pair.b, pair.a) if swap else (pair.a, pair.b)
            negative = SamplerService._negative_for(
                anchor, positive, batch, index, parent_of, pool, rng
            )
            triplets.append(Triplet(anchor, positive, negative, pair.relation))
        return triplets

    @staticmethod
    def sample_triplets(
        pairs: Sequence[PositivePair],
        parent_of: Mapping[int, int],
        config: BatchConfig,
        epochs: Optional[int] = None,
        ordering_pool: Sequence[Triplet] = (),
        resample_log: Optional[List[ResampleEvent]] = None
    ) -> Iterator[List[Triplet]]:
        """
        Генерирует батчи триплетов.

        В каждой эпохе пары перемешиваются и режутся на батчи по
        ``batch_size`` (последний батч может быть неполным); каждая пара
        встречается в эпохе ровно один раз, роли якоря и позитива
        выбираются случайно.

        Args:
            pairs: Положительные пары.
            parent_of: Родительский кластер узла (нет ключа - узел удалён).
            config: Параметры батчей.
            epochs: Число эпох; по умолчанию ``config.epochs``.
            ordering_pool: Триплеты (A, A', B') для добавления в батч при
                ``ordering_fraction`` > 0.
            resample_log: Список, куда записываются пересборки батчей.

        Yields:
            List[Triplet]: Триплеты одного батча.

        Raises:
            ConfigurationError: Меньше двух родительских кластеров.
            BatchCompositionError: Пересборка не помогла за ``max_retries`` попыток.

        Example:
            >>> stream = SamplerService.sample_triplets(pairs, graph.parent_of, BatchConfig())
            >>> first_batch = next(stream)
        """
        represented = {
            parent_of[node] for pair in pairs for node in (pair.a, pair.b) if node in parent_of
        }
        if len(represented) < 2:
            raise ConfigurationError(
                f"для негативов нужно минимум 2 родительских кластера, есть {len(represented)}"
            )

        pool = _NegativePool(parent_of)
        rng = np.random.default_rng(config.seed)
        epochs = config.epochs if epochs is None else epochs
        extra = int(math.floor(config.ordering_fraction * config.batch_size + 0.5))
        if ordering_pool and extra:
            logger.info(f"Дополнительные триплеты (A, A', B'): {extra} на батч")

        for epoch in range(epochs):
            remaining = rng.permutation(len(pairs))
            batch_index = 0
            while remaining.size:
                attempt = {"n": 0}

                @retry(
                    stop=stop_after_attempt(config.max_retries + 1),
                    retry=retry_if_exception_type(BatchCompositionError),
                    reraise=True,
                )
                def compose() -> List[Triplet]:
                    nonlocal remaining
                    if attempt["n"]:
                        remaining = remaining[rng.permutation(remaining.size)]
                        if resample_log is not None:
                            resample_log.append(ResampleEvent(epoch, batch_index, attempt["n"]))
                        logger.warning(
                            f"Батч {batch_index} (эпоха {epoch}) пересобран, "
                            f"попытка {attempt['n']}"
                        )
                    attempt["n"] += 1
                    batch = [pairs[i] for i in remaining[:config.batch_size].tolist()]
                    return SamplerService._compose(batch, parent_of, pool, rng)

                triplets = compose()
                if ordering_pool and extra:
                    picks = rng.integers(len(ordering_pool), size=extra)
                    triplets.extend(ordering_pool[i] for i in picks.tolist())

                remaining = remaining[config.batch_size:]
                batch_index += 1
                yield triplets

            logger.debug(f"Эпоха {epoch}: {batch_index} батчей")

    @staticmethod
    def epochs_for(n_pairs: int, batch_size: int, iterations: int, minimum: int = 1) -> int:
        """Сколько эпох покрывает ``iterations`` батчей (не меньше ``minimum``)."""
        if n_pairs == 0:
            return minimum
        per_epoch = math.ceil(n_pairs / batch_size)
        return max(minimum, math.ceil(iterations / per_epoch))

    # =========================================================================
    # ДОПОЛНИТЕЛЬНОЕ ОТНОШЕНИЕ D(A, A') < D(A, B')
    # =========================================================================

    @staticmethod
    def ordering_pool(graph: AffinityGraph) -> List[Triplet]:
        """
        Все триплеты (A, A', B') графа: A-B inter-ребро (в обе стороны),
        A' - intra-сосед A, B' - intra-сосед B.

        Остаются только триплеты, где B' не лежит в родительском кластере A.
        """
        adjacency = graph.intra_adjacency
        pool: List[Triplet] = []
        for edge in graph.inter_edges():
            for a, b in ((edge.a, edge.b), (edge.b, edge.a)):
                anchor_parent = graph.parent_of.get(a)
                for a_prime in sorted(adjacency.get(a, ())):
                    for b_prime in sorted(adjacency.get(b, ())):
                        if len({a, a_prime, b_prime}) < 3:
                            continue
                        if graph.parent_of.get(b_prime) == anchor_parent:
                            continue
                        pool.append(Triplet(a, a_prime, b_prime, Relation.ORDERING))
        return pool

    @staticmethod
    def ordering_triplets(graph: AffinityGraph, seed: int, count: int) -> List[Triplet]:
        """
        Выборка с возвращением из ``ordering_pool``.

        Returns:
            List[Triplet]: ``count`` триплетов или пустой список, если
            подходящих четвёрок в графе нет.
        """
        pool = SamplerService.ordering_pool(graph)
        if not pool or count <= 0:
            if count > 0:
                logger.warning("В графе нет четвёрок (A, A', B, B') для доп. триплетов")
            return []
        rng = np.random.default_rng(seed)
        return [pool[i] for i in rng.integers(len(pool), size=count).tolist()]

    # =========================================================================
    # ФАЙЛ ТРИПЛЕТОВ
    # =========================================================================

    @staticmethod
    def save_batches(batches: Iterator[List[Triplet]], path: Union[str, Path]) -> int:
        """
        Сохраняет батчи: {batch, anchor, positive, negative, relation}.

        Returns:
            int: Число записанных триплетов.
        """

        def records():
            for batch_index, batch in enumerate(batches):
                for triplet in batch:
                    yield {
                        "batch": batch_index,
                        "anchor": triplet.anchor,
                        "positive": triplet.positive,
                        "negative": triplet.negative,
                        "relation": triplet.relation.value,
                    }

        count = write_jsonl(path, records())
        logger.info(f"💾 Триплеты сохранены: {path} ({count})")
        return count

    @staticmethod
    def load_batches(path: Union[str, Path]) -> List[List[Triplet]]:
        """
        Загружает триплеты, сгруппированные по батчам.

        Raises:
            ParseError: Некорректная запись или батчи не по порядку.
        """
        batches: Dict[int, List[Triplet]] = {}
        last = -1
        for line, record in iter_jsonl(path):
            batch_index = require_field(record, "batch", int, line)
            if batch_index < last:
                raise ParseError(f"номер батча {batch_index} меньше предыдущего", line=line)
            last = batch_index
            relation = parse_relation(require_field(record, "relation", str, line), line)
            try:
                triplet = Triplet(
                    anchor=require_field(record, "anchor", int, line),
                    positive=require_field(record, "positive", int, line),
                    negative=require_field(record, "negative", int, line),
                    relation=relation,
                )
            except ParseError:
                raise
            except ValueError as exc:
                raise ParseError(str(exc), line=line) from exc
            batches.setdefault(batch_index, []).append(triplet)
        return [batches[index] for index in sorted(batches)]
