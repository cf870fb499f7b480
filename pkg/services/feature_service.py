"""
TIVG Pipeline Services Module - Feature Service
===============================================

Сервис загрузки и проверки признаков патчей и их метаданных.

Матрица признаков заменяет экстрактор признаков ConvNet: каждая строка -
дескриптор одного патча (в исходной постановке pool5, 3x3x512 = 4608).

Author: TIVG Team
License: MIT
"""

from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
from loguru import logger

from errors import DataValidationError
from models import FeatureStore, NodeMeta, PatchNode
from storage import (
    VERSION_FLOAT32,
    iter_jsonl,
    read_matrix,
    require_field,
    write_jsonl,
    write_matrix,
)

# Строки с нормой ниже этого порога считаются нулевыми
ZERO_NORM_EPS = 1e-12


class FeatureService:
    """
    Сервис для работы с признаками и метаданными узлов.

    Методы:
        load_features: Загрузить и проверить TIVG файл признаков
        save_features: Сохранить признаки в TIVG v1
        l2_normalize: Нормировать строки на единичную длину
        load_meta / save_meta: Метаданные узлов (JSON-lines)
        attach: Собрать узлы графа из метаданных и признаков
    """

    @staticmethod
    def validate(store: FeatureStore) -> FeatureStore:
        """
        Проверяет отсутствие NaN/Inf и нулевых строк.

        Args:
            store: Хранилище признаков.

        Returns:
            FeatureStore: То же хранилище.

        Raises:
            DataValidationError: С номером первой некорректной строки.
        """
        data = store.data
        if data.ndim != 2:
            raise DataValidationError(f"ожидалась матрица n x d, ndim={data.ndim}")
        if store.n == 0:
            return store

        finite_rows = np.isfinite(data).all(axis=1)
        if not finite_rows.all():
            row = int(np.flatnonzero(~finite_rows)[0])
            raise DataValidationError("NaN или Inf в признаках", row=row)

        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        zero_rows = norms < ZERO_NORM_EPS
        if zero_rows.any():
            row = int(np.flatnonzero(zero_rows)[0])
            raise DataValidationError("строка с нулевой нормой", row=row)
        return store

    @staticmethod
    def load_features(
        path: Union[str, Path],
        expected_dim: Optional[int] = None
    ) -> FeatureStore:
        """
        Загружает матрицу признаков и проверяет её.

        Args:
            path: Путь к TIVG файлу.
            expected_dim: Ожидаемая размерность d, если известна.

        Returns:
            FeatureStore: Проверенное хранилище (float32).

        Raises:
            ParseError: Файл повреждён.
            DataValidationError: Несовпадение размерности, NaN, нулевая строка.
        """
        data = read_matrix(path).astype(np.float32, copy=False)
        if expected_dim is not None and store_dim(data) != expected_dim:
            raise DataValidationError(
                f"размерность {store_dim(data)} не совпадает с ожидаемой {expected_dim}"
            )
        data.setflags(write=False)
        store = FeatureService.validate(FeatureStore(data))
        logger.info(f"Признаки загружены: {path} (n={store.n}, d={store.d})")
        return store

    @staticmethod
    def save_features(store: FeatureStore, path: Union[str, Path]) -> None:
        """Сохраняет признаки в TIVG v1 (float32)."""
        write_matrix(path, store.data, version=VERSION_FLOAT32)

    @staticmethod
    def from_array(matrix: np.ndarray) -> FeatureStore:
        """
        Создаёт проверенное хранилище из массива.

        Значения приводятся к float32 - тому же типу, что хранится на диске,
        поэтому данные в памяти и после перезагрузки совпадают.
        """
        data = np.array(matrix, dtype=np.float32, copy=True)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, 0)
        data.setflags(write=False)
        return FeatureService.validate(FeatureStore(data))

    @staticmethod
    def l2_normalize(store: FeatureStore) -> FeatureStore:
        """
        Нормирует каждую строку на единичную евклидову длину.

        После нормировки косинусное расстояние сводится к скалярному
        произведению. Направление строк сохраняется.

        Args:
            store: Хранилище без нулевых строк.

        Returns:
            FeatureStore: Новое хранилище с нормой строк 1 +- 1e-6.

        Raises:
            DataValidationError: Строка с нулевой нормой.

        Example:
            >>> store = FeatureService.from_array([[3.0, 4.0]])
            >>> FeatureService.l2_normalize(store).data
            array([[0.6, 0.8]], dtype=float32)
        """
        FeatureService.validate(store)
        if store.n == 0:
            return store
        data = store.data.astype(np.float64)
        norms = np.linalg.norm(data, axis=1, keepdims=True)
        normalized = (data / norms).astype(np.float32)
        normalized.setflags(write=False)
        return FeatureStore(normalized)

    @staticmethod
    def is_normalized(store: FeatureStore, atol: float = 1e-4) -> bool:
        """Проверяет, что все строки имеют единичную норму."""
        if store.n == 0:
            return True
        norms = np.linalg.norm(store.data.astype(np.float64), axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= atol))

    # =========================================================================
    # МЕТАДАННЫЕ УЗЛОВ
    # =========================================================================

    @staticmethod
    def meta_records(nodes: Iterable[PatchNode]) -> Iterable[dict]:
        """Записи JSON-lines вида {node, video, track, frame}."""
        for node in nodes:
            yield {
                "node": node.node_id,
                "video": node.video_id,
                "track": node.track_id,
                "frame": node.frame_index,
            }

    @staticmethod
    def parse_meta_record(record: dict, line: int) -> PatchNode:
        """Разбирает одну запись метаданных узла."""
        return PatchNode(
            node_id=require_field(record, "node", int, line),
            video_id=str(require_field(record, "video", (str, int), line)),
            track_id=str(require_field(record, "track", (str, int), line)),
            frame_index=require_field(record, "frame", int, line),
        )

    @staticmethod
    def save_meta(meta: NodeMeta, path: Union[str, Path]) -> None:
        """Сохраняет метаданные узлов."""
        write_jsonl(path, FeatureService.meta_records(meta.nodes))

    @staticmethod
    def load_meta(path: Union[str, Path]) -> NodeMeta:
        """
        Загружает метаданные узлов.

        Args:
            path: JSON-lines файл с полями node, video, track, frame.

        Returns:
            NodeMeta: Записи, отсортированные по node_id.

        Raises:
            ParseError: Некорректная строка (с номером строки).
        """
        nodes: List[PatchNode] = [
            FeatureService.parse_meta_record(record, line)
            for line, record in iter_jsonl(path)
        ]
        nodes.sort(key=lambda node: node.node_id)
        meta = NodeMeta(tuple(nodes))
        logger.info(f"Метаданные загружены: {path} ({len(meta)} узлов)")
        return meta

    @staticmethod
    def attach(meta: NodeMeta, store: FeatureStore) -> List[PatchNode]:
        """
        Объединяет метаданные и признаки в узлы графа.

        Raises:
            DataValidationError: Метаданные не выровнены со строками.
        """
        meta.validate(store.n)
        return [
            PatchNode(
                node_id=node.node_id,
                video_id=node.video_id,
                track_id=node.track_id,
                frame_index=node.frame_index,
                feature=store.data[node.node_id],
            )
            for node in meta.nodes
        ]


def store_dim(data: np.ndarray) -> int:
    """Размерность признаков матрицы."""
    return int(data.shape[1]) if data.ndim == 2 else 0
