"""
TIVG Pipeline Services Module - Clustering Service
==================================================

Первый этап кластеризации: сферический K-means по признакам узлов
и удаление мелких кластеров. Оставшиеся кластеры становятся
"родительскими".

Расстояние везде косинусное, центроиды нормируются на каждом шаге.
Редукции выполняются блоками фиксированного размера в фиксированном
порядке, поэтому результат побитно одинаков при любом числе потоков.

Author: TIVG Team
License: MIT
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from config import KMeansConfig
from errors import ConfigurationError, DataValidationError
from models import FeatureStore, ParentCluster
from services.feature_service import FeatureService
from storage import iter_jsonl, require_field, write_jsonl

# Размер блока строк для параллельных шагов (не зависит от числа потоков)
CHUNK_ROWS = 2048

# Метка узла, не попавшего ни в один родительский кластер
UNASSIGNED = -1


@dataclass(frozen=True)
class ReseedEvent:
    """Пустой кластер заново инициализирован самой дальней точкой."""

    iteration: int
    cluster_id: int
    node_id: int


@dataclass(frozen=True)
class KMeansResult:
    """
    Результат сферического K-means.

    Attributes:
        centroids: K x d, строки единичной нормы.
        assignments: Номер кластера для каждого узла.
        objective_trace: Средние косинусные расстояния до центроидов
            после каждого шага назначения (начиная с инициализации).
        reseed_events: Пересевы пустых кластеров.
    """

    centroids: np.ndarray
    assignments: np.ndarray
    objective_trace: List[float]
    reseed_events: List[ReseedEvent] = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.objective_trace) - 1


def _row_chunks(n: int) -> List[Tuple[int, int]]:
    return [(start, min(start + CHUNK_ROWS, n)) for start in range(0, n, CHUNK_ROWS)]


def _assign_chunk(rows: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    similarities = rows @ centroids.T
    labels = np.argmax(similarities, axis=1)
    best = similarities[np.arange(rows.shape[0]), labels]
    return labels.astype(np.int64), best


def _sum_chunk(rows: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    partial = np.zeros((k, rows.shape[1]), dtype=np.float64)
    np.add.at(partial, labels, rows)
    return partial


class ClusteringService:
    """
    Сервис первого этапа кластеризации.

    Методы:
        kmeans_fit: Сферический K-means с k-means++ инициализацией
        prune_clusters: Удалить кластеры меньше порога
        parent_clusters: Собрать родительские кластеры с центроидами
    """

    @staticmethod
    def _assign(
        points: np.ndarray,
        centroids: np.ndarray,
        workers: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        chunks = _row_chunks(points.shape[0])
        results = Parallel(n_jobs=workers, backend="threading")(
            delayed(_assign_chunk)(points[start:stop], centroids)
            for start, stop in chunks
        )
        labels = np.concatenate([labels for labels, _ in results])
        best = np.concatenate([best for _, best in results])
        return labels, best

    @staticmethod
    def _cluster_sums(
        points: np.ndarray,
        labels: np.ndarray,
        k: int,
        workers: int
    ) -> np.ndarray:
        chunks = _row_chunks(points.shape[0])
        partials = Parallel(n_jobs=workers, backend="threading")(
            delayed(_sum_chunk)(points[start:stop], labels[start:stop], k)
            for start, stop in chunks
        )
        # Суммирование строго в порядке блоков
        total = np.zeros((k, points.shape[1]), dtype=np.float64)
        for partial in partials:
            total += partial
        return total

    @staticmethod
    def kmeans_plus_plus(points: np.ndarray, k: int, seed: int) -> np.ndarray:
        """
        Инициализация k-means++ с косинусным расстоянием.

        Следующий центр выбирается с вероятностью, пропорциональной
        квадрату расстояния до ближайшего уже выбранного центра.

        Args:
            points: Нормированные точки n x d.
            k: Число центров.
            seed: Зерно генератора.

        Returns:
            np.ndarray: k x d начальные центроиды.
        """
        rng = np.random.default_rng(seed)
        n = points.shape[0]
        chosen = [int(rng.integers(n))]
        min_dist = np.clip(1.0 - points @ points[chosen[0]], 0.0, None)
        min_dist[chosen[0]] = 0.0

        for _ in range(1, k):
            weights = min_dist ** 2
            total = float(weights.sum())
            if total > 0.0:
                index = int(rng.choice(n, p=weights / total))
            else:
                # Все оставшиеся точки совпадают с выбранными центрами
                remaining = np.setdiff1d(np.arange(n), np.asarray(chosen))
                index = int(rng.choice(remaining))
            chosen.append(index)
            distances = np.clip(1.0 - points @ points[index], 0.0, None)
            min_dist = np.minimum(min_dist, distances)
            min_dist[index] = 0.0

        return points[np.asarray(chosen)].copy()

    @staticmethod
    def kmeans_fit(
        store: FeatureStore,
        config: KMeansConfig,
        workers: int = 1,
        init_centroids: Optional[np.ndarray] = None
    ) -> KMeansResult:
        """
        Сферический K-means (алгоритм Ллойда на единичной сфере).

        Args:
            store: Нормированные признаки.
            config: Параметры K-means.
            workers: Число потоков; на результат не влияет.
            init_centroids: Явные начальные центроиды K x d (вместо k-means++).

        Returns:
            KMeansResult: Центроиды, назначения и след целевой функции.

        Raises:
            ConfigurationError: Если n < K или форма init_centroids неверна.
            DataValidationError: Если строки не нормированы.

        Example:
            >>> result = ClusteringService.kmeans_fit(store, KMeansConfig(K=2))
            >>> result.assignments[:5]
        """
        n, k = store.n, config.K
        if n < k:
            raise ConfigurationError(f"точек n={n} меньше числа кластеров K={k}")
        if not FeatureService.is_normalized(store):
            raise DataValidationError("для сферического K-means строки должны быть нормированы")

        points = store.data.astype(np.float64)
        if init_centroids is not None:
            centroids = np.array(init_centroids, dtype=np.float64, copy=True)
            if centroids.shape != (k, store.d):
                raise ConfigurationError(
                    f"init_centroids формы {centroids.shape}, ожидалось {(k, store.d)}"
                )
            centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
        else:
            centroids = ClusteringService.kmeans_plus_plus(points, k, config.seed)

        labels, best = ClusteringService._assign(points, centroids, workers)
        trace = [float(np.mean(1.0 - best))]
        reseeds: List[ReseedEvent] = []

        for iteration in range(1, config.max_iters + 1):
            sums = ClusteringService._cluster_sums(points, labels, k, workers)
            norms = np.linalg.norm(sums, axis=1)
            empty = np.flatnonzero(norms < 1e-12)
            new_centroids = np.zeros_like(sums)
            alive = norms >= 1e-12
            new_centroids[alive] = sums[alive] / norms[alive, None]

            if empty.size:
                # Самые дальние точки: по убыванию расстояния, затем по id
                distances = 1.0 - best
                order = np.lexsort((np.arange(n), -distances))
                for cluster_id, node_id in zip(empty.tolist(), order[: empty.size].tolist()):
                    new_centroids[cluster_id] = points[node_id]
                    reseeds.append(ReseedEvent(iteration, cluster_id, node_id))
                    logger.warning(
                        f"Пустой кластер {cluster_id} пересеян точкой {node_id} "
                        f"(итерация {iteration})"
                    )

            new_labels, best = ClusteringService._assign(points, new_centroids, workers)
            objective = float(np.mean(1.0 - best))
            previous = trace[-1]
            trace.append(objective)
            unchanged = bool(np.array_equal(new_labels, labels)) and not empty.size
            centroids, labels = new_centroids, new_labels

            relative_change = (previous - objective) / max(abs(previous), 1e-12)
            if unchanged or relative_change < config.tol:
                break

        logger.info(
            f"K-means: K={k}, n={n}, итераций {len(trace) - 1}, "
            f"цель {trace[0]:.5f} -> {trace[-1]:.5f}, пересевов {len(reseeds)}"
        )
        return KMeansResult(centroids, labels, trace, reseeds)

    @staticmethod
    def prune_clusters(assignments: np.ndarray, min_cluster_size: int) -> np.ndarray:
        """
        Удаляет кластеры меньше ``min_cluster_size`` и переиндексирует остальные.

        Args:
            assignments: Номер кластера каждого узла (UNASSIGNED допустим).
            min_cluster_size: Минимальный размер выжившего кластера.

        Returns:
            np.ndarray: Родительский кластер каждого узла; узлы удалённых
            кластеров получают UNASSIGNED. Новые номера плотные и идут
            в порядке возрастания старых.

        Example:
            >>> ClusteringService.prune_clusters(np.array([0, 0, 1, 2, 2]), 2)
            array([ 0,  0, -1,  1,  1])
        """
        assignments = np.asarray(assignments, dtype=np.int64)
        assigned = assignments[assignments >= 0]
        if assigned.size == 0:
            return np.full_like(assignments, UNASSIGNED)

        sizes = np.bincount(assigned)
        survivors = np.flatnonzero(sizes >= min_cluster_size)
        remap = np.full(sizes.shape[0], UNASSIGNED, dtype=np.int64)
        remap[survivors] = np.arange(survivors.size, dtype=np.int64)

        parents = np.full_like(assignments, UNASSIGNED)
        mask = assignments >= 0
        parents[mask] = remap[assignments[mask]]

        logger.info(
            f"Прореживание: K {int(np.count_nonzero(sizes))} -> {survivors.size} "
            f"(порог {min_cluster_size}), без кластера {int(np.sum(parents < 0))} узлов"
        )
        return parents

    @staticmethod
    def parent_clusters(
        store: FeatureStore,
        parent_assignments: np.ndarray
    ) -> List[ParentCluster]:
        """
        Собирает родительские кластеры с нормированными центроидами.

        Returns:
            List[ParentCluster]: В порядке cluster_id.
        """
        parents = np.asarray(parent_assignments, dtype=np.int64)
        clusters: List[ParentCluster] = []
        if not np.any(parents >= 0):
            return clusters
        for cluster_id in range(int(parents.max()) + 1):
            members = np.flatnonzero(parents == cluster_id)
            mean = store.rows(members).sum(axis=0)
            clusters.append(
                ParentCluster(
                    cluster_id=cluster_id,
                    members=frozenset(members.tolist()),
                    centroid=mean / np.linalg.norm(mean),
                )
            )
        return clusters

    # =========================================================================
    # НАЗНАЧЕНИЯ НА ДИСКЕ
    # =========================================================================

    @staticmethod
    def save_assignments(parent_assignments: np.ndarray, path: Union[str, Path]) -> None:
        """Сохраняет назначения {node, parent}; узлы без кластера не пишутся."""
        write_jsonl(
            path,
            (
                {"node": node, "parent": int(parent)}
                for node, parent in enumerate(np.asarray(parent_assignments).tolist())
                if parent >= 0
            ),
        )

    @staticmethod
    def load_assignments(path: Union[str, Path], n_nodes: int) -> np.ndarray:
        """
        Загружает назначения в массив длины ``n_nodes``.

        Raises:
            ParseError: Некорректная запись.
            DataValidationError: Узел вне диапазона.
        """
        parents = np.full(n_nodes, UNASSIGNED, dtype=np.int64)
        for line, record in iter_jsonl(path):
            node = require_field(record, "node", int, line)
            parent = require_field(record, "parent", int, line)
            if not 0 <= node < n_nodes:
                raise DataValidationError(f"строка {line}: узел вне диапазона", item_id=node)
            parents[node] = parent
        return parents
