"""
TIVG Pipeline Services Module - Eval Service
============================================

Оценка качества графа и вложений на синтетических данных:

* чистота дочерних кластеров по истинным категориям;
* precision@k поиска ближайших соседей (в т.ч. между ракурсами и
  между разными экземплярами);
* доля четвёрок (A, A', B, B') с D(A, A') < D(A, B');
* сравнение режимов набора пар (полный транзитивный и абляции).

Author: TIVG Team
License: MIT
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from config import PipelineConfig
from errors import DataValidationError
from models import AffinityGraph, ChildCluster, EmbeddingModel, FeatureStore, GroundTruth
from services.metric_service import MetricService, cosine_distances
from services.sampler_service import SamplerService
from services.transitivity_service import TransitivityService
from storage import write_csv, write_json

# Запросов в одной порции параллельного поиска
QUERY_CHUNK = 512

PROTOCOLS = ("standard", "cross_view", "cross_instance")


@dataclass(frozen=True)
class PurityResult:
    """Чистота дочерних кластеров."""

    strict: float
    majority: float
    n_clusters: int


@dataclass(frozen=True)
class ModeResult:
    """Результат обучения на одном режиме набора пар."""

    mode: str
    n_pairs: int
    final_loss: Optional[float]
    precision: Dict[int, float]
    ordering_rate: Optional[float]


def _gallery_mask(truth: GroundTruth, queries: np.ndarray, protocol: str) -> np.ndarray:
    """Допустимые элементы галереи для каждого запроса (без самого запроса)."""
    n = len(truth)
    mask = np.ones((queries.size, n), dtype=bool)
    mask[np.arange(queries.size), queries] = False
    if protocol in ("cross_view", "cross_instance"):
        mask &= truth.view[queries][:, None] != truth.view[None, :]
    if protocol == "cross_instance":
        mask &= truth.instance[queries][:, None] != truth.instance[None, :]
    return mask


def _precision_chunk(
    unit: np.ndarray,
    truth: GroundTruth,
    queries: np.ndarray,
    k: int,
    protocol: str
) -> np.ndarray:
    mask = _gallery_mask(truth, queries, protocol)
    same = truth.category[queries][:, None] == truth.category[None, :]
    if np.any((mask & same).sum(axis=1) < k):
        row = int(queries[np.flatnonzero((mask & same).sum(axis=1) < k)[0]])
        raise DataValidationError(
            f"протокол {protocol}: у запроса меньше k={k} элементов его категории в галерее",
            item_id=row,
        )
    similarities = unit[queries] @ unit.T
    similarities[~mask] = -np.inf
    gallery = np.arange(unit.shape[0])
    hits = np.empty(queries.size, dtype=np.float64)
    for position in range(queries.size):
        # По убыванию сходства, при равенстве - меньший индекс галереи
        order = np.lexsort((gallery, -similarities[position]))[:k]
        hits[position] = np.mean(same[position, order])
    return hits


class EvalService:
    """
    Сервис оценки.

    Методы:
        purity: Чистота дочерних кластеров
        retrieval_precision: precision@k по косинусному сходству
        quadruple_ordering_rate: Доля упорядоченных четвёрок
        membership_stats: Сколько групп у узлов
        compare_modes: Обучение и оценка каждого режима пар
        evaluate: Полный отчёт
    """

    @staticmethod
    def purity(child_clusters: Sequence[ChildCluster], truth: GroundTruth) -> PurityResult:
        """
        Доля дочерних кластеров, все участники которых одной категории,
        и средняя доля мажоритарной категории.

        Raises:
            DataValidationError: Участник без метки.

        Example:
            >>> EvalService.purity(clusters, truth).strict
            1.0
        """
        if not child_clusters:
            logger.warning("Чистота: нет дочерних кластеров")
            return PurityResult(strict=0.0, majority=0.0, n_clusters=0)
        strict, majority = [], []
        for cluster in child_clusters:
            for member in cluster.members:
                if not 0 <= member < len(truth):
                    raise DataValidationError("нет метки для участника кластера", item_id=member)
            labels = truth.category[list(cluster.members)]
            counts = np.bincount(labels)
            strict.append(float(counts.max() == labels.size))
            majority.append(counts.max() / labels.size)
        return PurityResult(
            strict=float(np.mean(strict)),
            majority=float(np.mean(majority)),
            n_clusters=len(child_clusters),
        )

    @staticmethod
    def retrieval_precision(
        embeddings: np.ndarray,
        truth: GroundTruth,
        k: int,
        protocol: str = "cross_instance",
        workers: int = 1
    ) -> float:
        """
        Средняя доля соседей той же категории среди top-k по косинусу.

        Протоколы:
            standard: галерея - все узлы, кроме запроса;
            cross_view: только узлы другого ракурса;
            cross_instance: другого ракурса и другого экземпляра.

        Raises:
            DataValidationError: Неизвестный протокол, нулевое вложение или
                у запроса меньше k элементов своей категории в галерее.
        """
        if protocol not in PROTOCOLS:
            raise DataValidationError(f"неизвестный протокол: {protocol}")
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape[0] != len(truth):
            raise DataValidationError(
                f"вложений {embeddings.shape[0]}, а меток {len(truth)}"
            )
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise DataValidationError(
                "нулевое вложение", row=int(np.flatnonzero(norms[:, 0] < 1e-12)[0])
            )
        unit = embeddings / norms

        n = embeddings.shape[0]
        chunks = [np.arange(start, min(start + QUERY_CHUNK, n)) for start in range(0, n, QUERY_CHUNK)]
        results = Parallel(n_jobs=workers, backend="threading")(
            delayed(_precision_chunk)(unit, truth, queries, k, protocol) for queries in chunks
        )
        return float(np.mean(np.concatenate(results)))

    @staticmethod
    def retrieval_table(
        embeddings: np.ndarray,
        truth: GroundTruth,
        ks: Sequence[int],
        protocol: str,
        workers: int = 1
    ) -> Dict[int, float]:
        """precision@k для нескольких k."""
        return {
            k: EvalService.retrieval_precision(embeddings, truth, k, protocol, workers)
            for k in ks
        }

    @staticmethod
    def quadruples(graph: AffinityGraph) -> np.ndarray:
        """
        Все четвёрки (A, A', B, B'): A-B inter-ребро в обе стороны,
        A' и B' - intra-соседи, все четыре узла различны.
        """
        adjacency = graph.intra_adjacency
        rows: List[Tuple[int, int, int, int]] = []
        for edge in graph.inter_edges():
            for a, b in ((edge.a, edge.b), (edge.b, edge.a)):
                for a_prime in sorted(adjacency.get(a, ())):
                    for b_prime in sorted(adjacency.get(b, ())):
                        if len({a, a_prime, b, b_prime}) == 4:
                            rows.append((a, a_prime, b, b_prime))
        return np.array(rows, dtype=np.int64).reshape(-1, 4)

    @staticmethod
    def quadruple_ordering_rate(
        embeddings: np.ndarray,
        graph: AffinityGraph,
        n_samples: int,
        seed: int
    ) -> float:
        """
        Доля выбранных четвёрок, где D(A, A') < D(A, B') строго.

        Четвёрки выбираются равномерно с возвращением.

        Raises:
            DataValidationError: В графе нет четвёрок.
        """
        candidates = EvalService.quadruples(graph)
        if candidates.shape[0] == 0:
            raise DataValidationError("в графе нет четвёрок (A, A', B, B')")
        rng = np.random.default_rng(seed)
        sample = candidates[rng.integers(candidates.shape[0], size=n_samples)]
        embeddings = np.asarray(embeddings, dtype=np.float64)
        same = cosine_distances(embeddings[sample[:, 0]], embeddings[sample[:, 1]])
        cross = cosine_distances(embeddings[sample[:, 0]], embeddings[sample[:, 3]])
        return float(np.mean(same < cross))

    @staticmethod
    def membership_stats(
        child_clusters: Sequence[ChildCluster],
        parent_of: Mapping[int, int]
    ) -> Dict[str, Any]:
        """
        Статистика членства узлов в дочерних кластерах.

        Returns:
            dict: Число узлов с родителем, в группах, ровно в одной группе,
            доля "ровно в одной" среди узлов в группах и максимум групп на узел.
        """
        counts: Dict[int, int] = {}
        for cluster in child_clusters:
            for member in cluster.members:
                counts[member] = counts.get(member, 0) + 1
        in_groups = len(counts)
        exactly_one = sum(1 for value in counts.values() if value == 1)
        return {
            "assigned_nodes": len(parent_of),
            "nodes_in_groups": in_groups,
            "nodes_in_one_group": exactly_one,
            "single_membership_fraction": exactly_one / in_groups if in_groups else 0.0,
            "max_memberships": max(counts.values()) if counts else 0,
        }

    # =========================================================================
    # СРАВНЕНИЕ РЕЖИМОВ
    # =========================================================================

    @staticmethod
    def initial_model(config: PipelineConfig, d_in: int) -> EmbeddingModel:
        """Необученная модель с тем же зерном, что у этапа train."""
        return MetricService.init_model(
            config.train.architecture,
            d_in=d_in,
            d_out=config.train.d_out,
            hidden=config.train.hidden,
            seed=config.train.seed,
        )

    @staticmethod
    def train_mode(
        mode: str,
        graph: AffinityGraph,
        store: FeatureStore,
        config: PipelineConfig,
        workers: int = 1
    ) -> Tuple[EmbeddingModel, int, Optional[float]]:
        """
        Обучает модель на наборе пар режима ``mode``.

        Returns:
            Tuple[EmbeddingModel, int, Optional[float]]: Модель, число пар, последняя
            потеря (None, если не сделано ни одного шага).
        """
        dataset = TransitivityService.build_pair_dataset(graph, config.pairs, mode, workers)
        epochs = SamplerService.epochs_for(
            len(dataset), config.batches.batch_size, config.train.iterations, config.batches.epochs
        )
        stream = SamplerService.sample_triplets(
            dataset.pairs, graph.parent_of, config.batches, epochs=epochs
        )
        model, trace = MetricService.train(
            EvalService.initial_model(config, store.d), stream, store, config.train
        )
        final_loss = trace[-1].mean_loss if trace else None
        return model, len(dataset), final_loss

    @staticmethod
    def compare_modes(
        graph: AffinityGraph,
        store: FeatureStore,
        truth: GroundTruth,
        config: PipelineConfig,
        workers: int = 1
    ) -> List[ModeResult]:
        """
        Обучает модель для каждого режима из ``config.eval.modes`` с одной и
        той же инициализацией и оценивает поиск и упорядочение четвёрок.
        """
        has_quadruples = EvalService.quadruples(graph).shape[0] > 0
        results: List[ModeResult] = []
        for mode in config.eval.modes:
            model, n_pairs, final_loss = EvalService.train_mode(mode, graph, store, config, workers)
            embeddings = MetricService.embed(model, store.data)
            precision = EvalService.retrieval_table(
                embeddings, truth, config.eval.ks, config.eval.protocol, workers
            )
            ordering = (
                EvalService.quadruple_ordering_rate(
                    embeddings, graph, config.eval.quadruple_samples, config.eval.seed
                )
                if has_quadruples
                else None
            )
            results.append(ModeResult(mode, n_pairs, final_loss, precision, ordering))
            logger.info(
                f"📊 Режим {mode}: пар {n_pairs}, P@k {precision}, упорядочение {ordering}"
            )
        return results

    @staticmethod
    def evaluate(
        graph: AffinityGraph,
        store: FeatureStore,
        truth: GroundTruth,
        model: EmbeddingModel,
        config: PipelineConfig,
        workers: int = 1
    ) -> Tuple[Dict[str, Any], List[ModeResult]]:
        """
        Собирает полный отчёт оценки.

        Args:
            graph: Граф сходства.
            store: Признаки узлов.
            truth: Истинная разметка.
            model: Обученная модель этапа train.
            config: Конфигурация конвейера.
            workers: Число потоков.

        Returns:
            Tuple[dict, List[ModeResult]]: Отчёт и результаты режимов (пустой
            список, если сравнение режимов выключено).
        """
        if len(truth) != store.n:
            raise DataValidationError(f"меток {len(truth)}, а узлов {store.n}")
        eval_config = config.eval
        purity = EvalService.purity(graph.child_clusters, truth)
        trained = MetricService.embed(model, store.data)
        untrained = MetricService.embed(EvalService.initial_model(config, store.d), store.data)

        has_quadruples = EvalService.quadruples(graph).shape[0] > 0

        def ordering(embeddings: np.ndarray) -> Optional[float]:
            if not has_quadruples:
                return None
            return EvalService.quadruple_ordering_rate(
                embeddings, graph, eval_config.quadruple_samples, eval_config.seed
            )

        def table(embeddings: np.ndarray) -> Dict[str, float]:
            values = EvalService.retrieval_table(
                embeddings, truth, eval_config.ks, eval_config.protocol, workers
            )
            return {str(k): value for k, value in values.items()}

        modes = (
            EvalService.compare_modes(graph, store, truth, config, workers)
            if eval_config.compare_modes
            else []
        )
        report: Dict[str, Any] = {
            "protocol": eval_config.protocol,
            "child_cluster_purity": purity.strict,
            "child_cluster_majority_purity": purity.majority,
            "n_child_clusters": purity.n_clusters,
            "membership": EvalService.membership_stats(graph.child_clusters, graph.parent_of),
            "retrieval_precision_at_k": table(trained),
            "retrieval_precision_at_k_untrained": table(untrained),
            "retrieval_precision_at_k_raw_features": table(store.data),
            "quadruple_ordering_rate": ordering(trained),
            "quadruple_ordering_rate_untrained": ordering(untrained),
            "train_mode": config.pairs.mode,
            "modes": {
                result.mode: {
                    "n_pairs": result.n_pairs,
                    "final_loss": result.final_loss,
                    "retrieval_precision_at_k": {
                        str(k): value for k, value in result.precision.items()
                    },
                    "quadruple_ordering_rate": result.ordering_rate,
                }
                for result in modes
            },
        }
        if not has_quadruples:
            logger.warning("В графе нет четвёрок: доля упорядочения не вычислена")
        logger.info(
            f"📈 Оценка: чистота {purity.strict:.3f}, P@k {report['retrieval_precision_at_k']}"
        )
        return report, modes

    @staticmethod
    def save_report(report: Dict[str, Any], path: Union[str, Path]) -> None:
        """Отчёт в JSON."""
        write_json(path, report)

    @staticmethod
    def save_modes_csv(
        modes: Sequence[ModeResult],
        ks: Sequence[int],
        path: Union[str, Path]
    ) -> None:
        """Таблица режимов: mode, n_pairs, final_loss, ordering_rate, p_at_k..."""
        header = ["mode", "n_pairs", "final_loss", "quadruple_ordering_rate"]
        header += [f"precision_at_{k}" for k in ks]
        write_csv(
            path,
            header,
            (
                [result.mode, result.n_pairs, result.final_loss, result.ordering_rate]
                + [result.precision[k] for k in ks]
                for result in modes
            ),
        )
