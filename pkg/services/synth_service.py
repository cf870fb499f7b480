"""
TIVG Pipeline Services Module - Synth Service
=============================================

Синтетический мир с известной разметкой: категории, экземпляры и
ракурсы экземпляров, связанные треками.

Признак узла::

    normalize(R_v (p_c + instance_offset) + noise)

где p_c - прототип категории, R_v - поворот признакового пространства
для ракурса v. Поворот затрагивает только часть измерений
(``rotated_fraction``), поэтому линейная модель может его компенсировать.

Author: TIVG Team
License: MIT
"""

from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from loguru import logger
from scipy.linalg import expm

from config import SynthConfig
from errors import ConfigurationError, ParseError
from models import FeatureStore, GroundTruth, NodeMeta, PatchNode
from services.feature_service import FeatureService
from storage import iter_jsonl, require_field, write_jsonl


def node_id_for(category: int, instance: int, view: int, config: SynthConfig) -> int:
    """Номер узла: ((c * I) + i) * V + v."""
    return (category * config.instances_per_category + instance) * config.views_per_instance + view


class SynthService:
    """
    Генератор синтетического мира.

    Методы:
        generate: Признаки, метаданные и разметка
        prototypes: Направления категорий
        view_maps: Повороты ракурсов
        save_ground_truth / load_ground_truth: Файл разметки
    """

    @staticmethod
    def prototypes(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
        """
        Прототипы категорий C x d единичной нормы.

        При ``category_separation`` = 1 прототипы ортонормированы; меньшие
        значения стягивают их к общему среднему направлению.
        """
        gaussian = rng.standard_normal((config.d_in, config.n_categories))
        q, r = np.linalg.qr(gaussian)
        # Знак диагонали R фиксирует базис однозначно
        q = q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r)))
        basis = q.T
        mean_direction = basis.mean(axis=0)
        mean_direction /= np.linalg.norm(mean_direction)
        separation = config.category_separation
        blended = separation * basis + (1.0 - separation) * mean_direction
        return blended / np.linalg.norm(blended, axis=1, keepdims=True)

    @staticmethod
    def view_maps(config: SynthConfig, rng: np.random.Generator) -> List[np.ndarray]:
        """
        Ортогональные матрицы d x d для каждого ракурса; ракурс 0 - единичная.

        R_v = expm(t * S_v) на случайном подпространстве размера
        round(rotated_fraction * d), S_v - кососимметричная матрица
        единичной спектральной нормы, t = ``view_distortion``.
        """
        d = config.d_in
        size = min(d, int(np.floor(config.rotated_fraction * d + 0.5)))
        subspace = np.sort(rng.permutation(d)[:size])
        maps = [np.eye(d)]
        for _ in range(1, config.views_per_instance):
            rotation = np.eye(d)
            if size >= 2:
                gaussian = rng.standard_normal((size, size))
                skew = (gaussian - gaussian.T) / 2.0
                skew /= np.linalg.norm(skew, ord=2)
                block = expm(config.view_distortion * skew)
                rotation[np.ix_(subspace, subspace)] = block
            maps.append(rotation)
        return maps

    @staticmethod
    def generate(config: SynthConfig) -> Tuple[FeatureStore, NodeMeta, GroundTruth]:
        """
        Генерирует синтетический набор данных.

        Args:
            config: Параметры мира.

        Returns:
            Tuple[FeatureStore, NodeMeta, GroundTruth]: n = C * I * V узлов,
            C * I треков; ракурсы экземпляра идут подряд с frame_index = v.

        Raises:
            ConfigurationError: d_in < C (нельзя получить ортогональные прототипы).

        Example:
            >>> store, meta, truth = SynthService.generate(SynthConfig(n_categories=2, d_in=8))
            >>> store.n
            40
        """
        C = config.n_categories
        I = config.instances_per_category
        V = config.views_per_instance
        d = config.d_in
        if d < C:
            raise ConfigurationError(f"d_in={d} меньше числа категорий C={C}")

        rng = np.random.default_rng(config.seed)
        prototypes = SynthService.prototypes(config, rng)
        offsets = rng.standard_normal((C, I, d)) / np.sqrt(d)
        maps = SynthService.view_maps(config, rng)
        noise = rng.standard_normal((C * I * V, d)) / np.sqrt(d)

        centers = prototypes[:, None, :] + config.instance_noise * offsets
        features = np.empty((C * I * V, d), dtype=np.float64)
        category = np.empty(C * I * V, dtype=np.int64)
        instance = np.empty(C * I * V, dtype=np.int64)
        view = np.empty(C * I * V, dtype=np.int64)
        nodes: List[PatchNode] = []

        for c in range(C):
            for i in range(I):
                global_instance = c * I + i
                for v in range(V):
                    node = node_id_for(c, i, v, config)
                    features[node] = maps[v] @ centers[c, i] + config.view_noise * noise[node]
                    category[node], instance[node], view[node] = c, global_instance, v
                    nodes.append(
                        PatchNode(
                            node_id=node,
                            video_id=f"v{global_instance}",
                            track_id=f"t{global_instance}",
                            frame_index=v,
                        )
                    )

        norms = np.linalg.norm(features, axis=1, keepdims=True)
        store = FeatureService.from_array(features / norms)
        meta = NodeMeta(tuple(nodes))
        truth = GroundTruth(category=category, instance=instance, view=view)

        logger.info(
            f"🧪 Синтетический мир: C={C}, I={I}, V={V}, d={d} -> {store.n} узлов, "
            f"{C * I} треков"
        )
        return store, meta, truth

    # =========================================================================
    # ФАЙЛ РАЗМЕТКИ
    # =========================================================================

    @staticmethod
    def save_ground_truth(truth: GroundTruth, path: Union[str, Path]) -> None:
        """Сохраняет разметку {node, category, instance, view}."""
        write_jsonl(
            path,
            (
                {"node": node, "category": c, "instance": i, "view": v}
                for node, (c, i, v) in enumerate(
                    zip(truth.category.tolist(), truth.instance.tolist(), truth.view.tolist())
                )
            ),
        )

    @staticmethod
    def load_ground_truth(path: Union[str, Path]) -> GroundTruth:
        """
        Загружает разметку.

        Raises:
            ParseError: Узлы не идут плотно 0..n-1.
        """
        rows: List[Tuple[int, int, int]] = []
        for line, record in iter_jsonl(path):
            node = require_field(record, "node", int, line)
            if node != len(rows):
                raise ParseError(f"ожидался узел {len(rows)}, получен {node}", line=line)
            rows.append(
                (
                    require_field(record, "category", int, line),
                    require_field(record, "instance", int, line),
                    require_field(record, "view", int, line),
                )
            )
        table = np.array(rows, dtype=np.int64).reshape(-1, 3)
        return GroundTruth(category=table[:, 0], instance=table[:, 1], view=table[:, 2])
