"""
TIVG Pipeline - Модуль конфигурации.

Этот модуль содержит настройки приложения и конфигурацию конвейера
с использованием Pydantic. Настройки окружения загружаются из .env файла
и переменных с префиксом ``TIVG_``; конфигурация конвейера собирается
из пресета, JSON файла и флагов командной строки.

Модуль соответствует стандартам PEP8 и PEP257 для документации.

Example:
    Сборка конфигурации конвейера::

        from config import build_pipeline_config
        config = build_pipeline_config(preset="desk", overrides=["kmeans.K=20"])
        print(config.stage_seed("cluster"))

Attributes:
    settings (Settings): Глобальный объект настроек приложения.
    PRESETS (dict): Именованные наборы значений ``paper`` и ``desk``.

Author: TIVG Team
License: MIT
Version: 1.0.0
"""

import copy
import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator
from pydantic_settings import BaseSettings

from errors import ConfigurationError


class Settings(BaseSettings):
    """
    Основные настройки приложения.

    Класс загружает конфигурацию из переменных окружения и .env файла.
    Эти значения не влияют на результаты вычислений, только на окружение
    запуска (логирование, число потоков по умолчанию, каталог вывода).

    Attributes:
        app_name: Название приложения.
        app_version: Версия приложения (пишется в манифест запуска).
        environment: Тип окружения (development, production, testing).
        debug: Режим отладки (подробный консольный лог).
        log_level: Уровень консольного логирования.
        log_dir: Каталог для файлового лога с ротацией.
        workers: Число рабочих потоков по умолчанию (``TIVG_WORKERS``).
        default_preset: Пресет, если ``--preset`` не указан.
        default_out_dir: Каталог артефактов, если ``--out`` не указан.

    Example:
        >>> from config import settings
        >>> print(settings.app_name)
        TIVG Pipeline
    """

    # =========================================================================
    # ОСНОВНЫЕ НАСТРОЙКИ ПРИЛОЖЕНИЯ
    # =========================================================================

    app_name: str = "TIVG Pipeline"
    app_version: str = "1.0.0"
    environment: Literal["development", "production", "testing"] = "development"
    debug: bool = False

    # =========================================================================
    # ЛОГИРОВАНИЕ
    # =========================================================================

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"
    log_dir: str = "logs"

    # =========================================================================
    # ЗАПУСК КОНВЕЙЕРА
    # =========================================================================

    workers: int = Field(default=1, ge=1)
    default_preset: Literal["paper", "desk"] = "desk"
    default_out_dir: str = "runs/default"

    class Config:
        """
        Конфигурация Pydantic модели.

        Attributes:
            env_prefix: Префикс переменных окружения.
            env_file: Путь к файлу с переменными окружения.
            env_file_encoding: Кодировка .env файла.
            case_sensitive: Чувствительность к регистру переменных.
            extra: Политика обработки дополнительных полей.
        """

        env_prefix = "TIVG_"
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False
        extra = "ignore"


@lru_cache()
def get_settings() -> Settings:
    """
    Получает и кэширует настройки приложения.

    Returns:
        Settings: Объект настроек с загруженными параметрами.
    """
    return Settings()


# Глобальный объект настроек для импорта в других модулях
settings = get_settings()


# =============================================================================
# КОНФИГУРАЦИИ ЭТАПОВ
# =============================================================================

class KMeansConfig(BaseModel):
    """
    Параметры первого этапа кластеризации (сферический K-means).

    Attributes:
        K: Число кластеров (пресет paper: 5000).
        max_iters: Максимум итераций Ллойда.
        tol: Порог относительного изменения целевой функции для остановки.
        min_cluster_size: Кластеры меньше этого размера удаляются (пресет paper: 100).
        seed: Зерно генератора для k-means++ инициализации.
    """

    K: int = Field(default=50, ge=1)
    max_iters: int = Field(default=100, ge=1)
    tol: float = Field(default=1e-4, gt=0)
    min_cluster_size: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)


class NeighborConfig(BaseModel):
    """
    Параметры второго этапа: kNN внутри родительского кластера и группы.

    Attributes:
        k: Число ближайших соседей (пресет paper: 10).
        g: Размер дочернего кластера (пресет paper: 4).
        max_memberships: Максимум групп на один узел; None - без ограничения.
    """

    k: int = Field(default=10, ge=1)
    g: int = Field(default=4, ge=2)
    max_memberships: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_k_covers_group(self) -> "NeighborConfig":
        if self.k < self.g - 1:
            raise ValueError(f"k={self.k} должно быть >= g-1={self.g - 1}")
        return self


class PairGenConfig(BaseModel):
    """
    Параметры генерации положительных пар.

    Attributes:
        intra_ratio: Целевая доля intra-пар в итоговом наборе (по умолчанию 2/9).
        mode: Режим набора пар (полный транзитивный или абляции).
        seed: Зерно для выборки intra-пар и перемешивания.
    """

    intra_ratio: float = Field(default=2.0 / 9.0, ge=0.0, lt=1.0)
    mode: Literal["transitive", "intra_only", "inter_only", "union"] = "transitive"
    seed: int = Field(default=0, ge=0, lt=2 ** 64)


class BatchConfig(BaseModel):
    """
    Параметры сэмплера триплетов.

    Attributes:
        batch_size: Число пар в мини-батче (пресет paper: 100).
        epochs: Число эпох при материализации файла триплетов.
        max_retries: Сколько раз пересобирать состав батча без допустимых негативов.
        ordering_fraction: Доля дополнительных триплетов (A, A', B') на батч;
            0 отключает это дополнительное отношение.
        seed: Зерно генератора батчей.
    """

    batch_size: int = Field(default=100, ge=2)
    epochs: int = Field(default=1, ge=1)
    max_retries: int = Field(default=10, ge=1)
    ordering_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)


class TrainConfig(BaseModel):
    """
    Параметры модели вложений и SGD.

    Attributes:
        margin: Отступ m функции ранжирования (пресет paper: 0.5).
        learning_rate: Шаг SGD (пресет paper: 0.001); 0 замораживает модель.
        batch_size: Размер мини-батча.
        iterations: Число шагов SGD.
        architecture: ``linear`` или ``one_hidden`` (ReLU между слоями).
        d_out: Размерность вложения (пресет paper: 1024).
        hidden: Ширина скрытого слоя (пресет paper: 4096).
        seed: Зерно инициализации весов.
    """

    margin: float = Field(default=0.5, gt=0.0)
    learning_rate: float = Field(default=0.001, ge=0.0)
    batch_size: int = Field(default=100, ge=2)
    iterations: int = Field(default=1000, ge=0)
    architecture: Literal["linear", "one_hidden"] = "linear"
    d_out: int = Field(default=1024, ge=1)
    hidden: int = Field(default=4096, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)


class SynthConfig(BaseModel):
    """
    Параметры синтетического мира (категории, экземпляры, ракурсы).

    Attributes:
        n_categories: Число категорий C.
        instances_per_category: Экземпляров на категорию I.
        views_per_instance: Ракурсов на экземпляр V (связаны треком).
        d_in: Размерность сырых признаков.
        category_separation: 1 - ортогональные прототипы, ближе к 0 - сближенные.
        instance_noise: Масштаб смещения экземпляра от прототипа.
        view_distortion: Угол поворота признаков для каждого ракурса. При 3.8
            повёрнутая часть признаков двух ракурсов почти не коррелирует,
            сходство ракурсов держится только на неповёрнутой части.
        view_noise: Шум отдельного узла.
        rotated_fraction: Доля измерений, которые затрагивает поворот ракурса.
        seed: Зерно генератора.
    """

    n_categories: int = Field(default=20, ge=1)
    instances_per_category: int = Field(default=10, ge=1)
    views_per_instance: int = Field(default=2, ge=2)
    d_in: int = Field(default=64, ge=1)
    category_separation: float = Field(default=0.5, gt=0.0, le=1.0)
    instance_noise: float = Field(default=0.8, ge=0.0)
    view_distortion: float = Field(default=3.8, ge=0.0)
    view_noise: float = Field(default=0.0, ge=0.0)
    rotated_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)


class EvalConfig(BaseModel):
    """
    Параметры оценки.

    Attributes:
        ks: Значения k для precision@k.
        protocol: ``standard``, ``cross_view`` или ``cross_instance``.
        quadruple_samples: Число четвёрок (A, A', B, B') для доли упорядочения.
        compare_modes: Обучать ли модель для каждого режима пар.
        modes: Сравниваемые режимы.
        seed: Зерно выборки четвёрок.
    """

    ks: List[int] = Field(default_factory=lambda: [1, 5])
    protocol: Literal["standard", "cross_view", "cross_instance"] = "cross_instance"
    quadruple_samples: int = Field(default=2000, ge=1)
    compare_modes: bool = False
    modes: List[Literal["transitive", "intra_only", "inter_only", "union"]] = Field(
        default_factory=lambda: ["intra_only", "inter_only", "union", "transitive"]
    )
    seed: int = Field(default=0, ge=0, lt=2 ** 64)


class PathsConfig(BaseModel):
    """
    Пути к входам и каталогу артефактов.

    Внешние признаки/метаданные имеют приоритет; если они не заданы,
    используются файлы, созданные командой ``synth`` в ``out_dir``.

    Attributes:
        out_dir: Каталог артефактов.
        features: Внешний TIVG файл признаков.
        meta: Внешний JSON-lines файл метаданных.
        ground_truth: Внешний JSON-lines файл разметки (только для eval).
    """

    out_dir: str = "runs/default"
    features: Optional[str] = None
    meta: Optional[str] = None
    ground_truth: Optional[str] = None

    def artifact(self, name: str) -> Path:
        """Путь к артефакту внутри ``out_dir``."""
        return Path(self.out_dir) / name

    def features_path(self) -> Path:
        return Path(self.features) if self.features else self.artifact("features.tivg")

    def meta_path(self) -> Path:
        return Path(self.meta) if self.meta else self.artifact("meta.jsonl")

    def ground_truth_path(self) -> Path:
        if self.ground_truth:
            return Path(self.ground_truth)
        return self.artifact("ground_truth.jsonl")


# =============================================================================
# СМЕЩЕНИЯ ЗЁРЕН ПО ЭТАПАМ
# =============================================================================

# Зерно этапа = master_seed + смещение; значения зафиксированы навсегда
STAGE_SEED_OFFSETS: Dict[str, int] = {
    "synth": 1_009,
    "cluster": 2_003,
    "pairs": 3_001,
    "triplets": 4_001,
    "train": 5_003,
    "eval": 6_007,
}


class PipelineConfig(BaseModel):
    """
    Полная конфигурация конвейера.

    Attributes:
        preset: Имя пресета, из которого собраны значения по умолчанию.
        master_seed: Главное зерно; зёрна этапов выводятся из него.
        workers: Число рабочих потоков (результат от него не зависит).
        paths: Пути к входам и артефактам.
        kmeans, neighbors, pairs, batches, train, synth, eval: Конфигурации этапов.
    """

    preset: Literal["paper", "desk"] = "desk"
    master_seed: int = Field(
        default=0, ge=0, lt=2 ** 64 - max(STAGE_SEED_OFFSETS.values())
    )
    workers: int = Field(default=1, ge=1)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    kmeans: KMeansConfig = Field(default_factory=KMeansConfig)
    neighbors: NeighborConfig = Field(default_factory=NeighborConfig)
    pairs: PairGenConfig = Field(default_factory=PairGenConfig)
    batches: BatchConfig = Field(default_factory=BatchConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_batch_sizes(self) -> "PipelineConfig":
        # Обучение читает батчи, собранные сэмплером
        if self.train.batch_size != self.batches.batch_size:
            raise ValueError(
                f"train.batch_size={self.train.batch_size} должно совпадать с "
                f"batches.batch_size={self.batches.batch_size}"
            )
        return self

    def stage_seed(self, stage: str) -> int:
        """
        Возвращает зерно этапа как чистую функцию главного зерна.

        Args:
            stage: Имя этапа из ``STAGE_SEED_OFFSETS``.

        Returns:
            int: ``master_seed + offset``.

        Raises:
            ConfigurationError: Если этап неизвестен.
        """
        if stage not in STAGE_SEED_OFFSETS:
            raise ConfigurationError(f"неизвестный этап для зерна: {stage}")
        return self.master_seed + STAGE_SEED_OFFSETS[stage]

    def with_stage_seeds(self) -> "PipelineConfig":
        """
        Копия конфигурации, где зерно каждого этапа выведено из главного.

        Returns:
            PipelineConfig: Новая конфигурация с проставленными зёрнами.
        """
        updates = {
            "synth": self.synth.model_copy(update={"seed": self.stage_seed("synth")}),
            "kmeans": self.kmeans.model_copy(update={"seed": self.stage_seed("cluster")}),
            "pairs": self.pairs.model_copy(update={"seed": self.stage_seed("pairs")}),
            "batches": self.batches.model_copy(
                update={"seed": self.stage_seed("triplets")}
            ),
            "train": self.train.model_copy(update={"seed": self.stage_seed("train")}),
            "eval": self.eval.model_copy(update={"seed": self.stage_seed("eval")}),
        }
        return self.model_copy(update=updates)

    def config_hash(self) -> str:
        """
        SHA-256 канонического JSON представления (без ``workers``).

        Число потоков не влияет на артефакты, поэтому в хеш не входит.
        """
        payload = self.model_dump(mode="json", exclude={"workers"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# =============================================================================
# ПРЕСЕТЫ
# =============================================================================

PRESETS: Dict[str, Dict[str, Any]] = {
    # Крупный масштаб: миллионы патчей
    "paper": {
        "kmeans": {"K": 5000, "min_cluster_size": 100, "max_iters": 100},
        "neighbors": {"k": 10, "g": 4},
        "pairs": {"intra_ratio": 2.0 / 9.0},
        "batches": {"batch_size": 100},
        "train": {
            "margin": 0.5,
            "learning_rate": 0.001,
            "batch_size": 100,
            "iterations": 200_000,
            "architecture": "one_hidden",
            "hidden": 4096,
            "d_out": 1024,
        },
    },
    # Масштаб рабочего стола: секунды на CPU
    "desk": {
        "kmeans": {"K": 50, "min_cluster_size": 5, "max_iters": 100},
        "neighbors": {"k": 10, "g": 4},
        "pairs": {"intra_ratio": 2.0 / 9.0},
        "batches": {"batch_size": 100},
        "train": {
            "margin": 0.5,
            "learning_rate": 0.2,
            "batch_size": 100,
            "iterations": 400,
            "architecture": "linear",
            "hidden": 64,
            "d_out": 32,
        },
        "eval": {"compare_modes": True},
    },
}


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Рекурсивно накладывает ``update`` на копию ``base``."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _parse_override(override: str) -> Dict[str, Any]:
    """
    Разбирает флаг ``--set a.b.c=value`` во вложенный словарь.

    Значение читается как JSON; если это не JSON, берётся строкой.

    Raises:
        ConfigurationError: Если нет знака ``=`` или пустой ключ.
    """
    if "=" not in override:
        raise ConfigurationError(f"ожидалось key.path=value, получено: {override}")
    key_path, raw_value = override.split("=", 1)
    keys = [key for key in key_path.strip().split(".") if key]
    if not keys:
        raise ConfigurationError(f"пустой ключ в переопределении: {override}")
    try:
        value: Any = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    nested: Dict[str, Any] = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        nested = {key: nested}
    return nested


def build_pipeline_config(
    preset: Optional[str] = None,
    config_path: Optional[str] = None,
    overrides: Optional[List[str]] = None,
    master_seed: Optional[int] = None,
    workers: Optional[int] = None,
    out_dir: Optional[str] = None
) -> PipelineConfig:
    """
    Собирает конфигурацию конвейера.

    Порядок наложения: пресет < JSON файл < ``--set`` < отдельные флаги.
    Зёрна этапов в результате всегда выведены из главного зерна.

    Args:
        preset: ``paper`` или ``desk``; по умолчанию из настроек окружения.
        config_path: Путь к JSON файлу конфигурации.
        overrides: Список строк ``key.path=value``.
        master_seed: Главное зерно (флаг ``--seed``).
        workers: Число потоков (флаг ``--workers``).
        out_dir: Каталог артефактов (флаг ``--out``).

    Returns:
        PipelineConfig: Провалидированная конфигурация.

    Raises:
        ConfigurationError: Неизвестный пресет или нечитаемый файл.
        pydantic.ValidationError: Значения вне допустимых диапазонов.

    Example:
        >>> config = build_pipeline_config(preset="paper")
        >>> config.kmeans.K
        5000
    """
    file_values: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"файл конфигурации не найден: {path}")
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"некорректный JSON в {path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigurationError(f"{path}: ожидался JSON объект")

    preset_name = preset or file_values.get("preset") or settings.default_preset
    if preset_name not in PRESETS:
        raise ConfigurationError(f"неизвестный пресет: {preset_name}")

    values: Dict[str, Any] = {
        "preset": preset_name,
        "workers": settings.workers,
        "paths": {"out_dir": settings.default_out_dir},
    }
    values = _deep_merge(values, PRESETS[preset_name])
    values = _deep_merge(values, file_values)
    values["preset"] = preset_name
    for override in overrides or []:
        values = _deep_merge(values, _parse_override(override))
    if master_seed is not None:
        values["master_seed"] = master_seed
    if workers is not None:
        values["workers"] = workers
    if out_dir is not None:
        values = _deep_merge(values, {"paths": {"out_dir": out_dir}})

    return PipelineConfig.model_validate(values).with_stage_seeds()
