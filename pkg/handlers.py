"""
TIVG Pipeline - Модуль обработчиков подкоманд.

Этот модуль содержит обработчики всех подкоманд CLI: синтетический мир,
кластеризация, граф, пары, триплеты, обучение, оценка, полный конвейер
и вывод JSON схемы конфигурации.

Каждый этап читает входы из каталога артефактов и пишет туда свои
результаты и манифест запуска ``manifests/<stage>.json``. Команда
``pipeline`` вызывает те же обработчики по порядку, поэтому её артефакты
побайтно совпадают с последовательным запуском отдельных команд.

Модуль соответствует стандартам PEP8 и PEP257.

Example:
    Регистрация подкоманд::

        from handlers import register_handlers
        register_handlers(subparsers, common)

Author: TIVG Team
License: MIT
Version: 1.0.0
"""

import argparse
import json
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional

import joblib
import networkx
import numpy as np
import pydantic
import scipy
from loguru import logger

from config import PipelineConfig, build_pipeline_config, settings
from errors import DataValidationError
from middleware import handle_exceptions, log_execution_time
from services import (
    ClusteringService,
    EvalService,
    FeatureService,
    GraphService,
    MetricService,
    NeighborService,
    SamplerService,
    SynthService,
    TransitivityService,
)
from storage import write_csv, write_json


# =============================================================================
# ИМЕНА АРТЕФАКТОВ
# =============================================================================

FEATURES = "features.tivg"
META = "meta.jsonl"
GROUND_TRUTH = "ground_truth.jsonl"
CENTROIDS = "centroids.tivg"
PARENTS = "parents.jsonl"
KMEANS_TRACE = "kmeans_trace.csv"
GRAPH = "graph.jsonl"
PAIRS = "pairs.jsonl"
TRIPLETS = "triplets.jsonl"
CHECKPOINT = "checkpoint"
LOSS_TRACE = "loss_trace.csv"
REPORT = "report.json"
MODES = "modes.csv"
MANIFESTS = "manifests"


# =============================================================================
# ВСПОМОГАТЕЛЬНЫЕ ФУНКЦИИ
# =============================================================================

def _require(path: Path, produced_by: str) -> Path:
    """Проверяет наличие входного артефакта."""
    if not path.exists():
        raise DataValidationError(
            f"нет входного файла {path} (создаётся командой '{produced_by}')"
        )
    return path


def _normalized_features(config: PipelineConfig):
    store = FeatureService.load_features(_require(config.paths.features_path(), "synth"))
    return FeatureService.l2_normalize(store)


def _write_manifest(
    stage: str,
    config: PipelineConfig,
    started: float,
    artifacts: List[str],
    extra: Optional[Dict[str, object]] = None
) -> None:
    """
    Пишет манифест запуска этапа.

    Манифест содержит время выполнения и потому не входит в набор
    побайтно воспроизводимых артефактов.
    """
    manifest = {
        "stage": stage,
        "config_hash": config.config_hash(),
        "preset": config.preset,
        "master_seed": config.master_seed,
        "workers": config.workers,
        "artifacts": artifacts,
        "elapsed_seconds": round(time.perf_counter() - started, 6),
        "versions": {
            "app": settings.app_version,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "networkx": networkx.__version__,
            "joblib": joblib.__version__,
            "pydantic": pydantic.VERSION,
        },
    }
    if extra:
        manifest["details"] = extra
    write_json(config.paths.artifact(MANIFESTS) / f"{stage}.json", manifest)


# =============================================================================
# ЭТАПЫ КОНВЕЙЕРА
# =============================================================================

@log_execution_time
def handle_synth(config: PipelineConfig) -> None:
    """Генерирует синтетический мир: признаки, метаданные, разметку."""
    started = time.perf_counter()
    store, meta, truth = SynthService.generate(config.synth)
    FeatureService.save_features(store, config.paths.artifact(FEATURES))
    FeatureService.save_meta(meta, config.paths.artifact(META))
    SynthService.save_ground_truth(truth, config.paths.artifact(GROUND_TRUTH))
    _write_manifest("synth", config, started, [FEATURES, META, GROUND_TRUTH])


@log_execution_time
def handle_cluster(config: PipelineConfig) -> None:
    """Сферический K-means и прореживание; пишет центроиды и назначения."""
    started = time.perf_counter()
    store = _normalized_features(config)
    result = ClusteringService.kmeans_fit(store, config.kmeans, workers=config.workers)
    parents = ClusteringService.prune_clusters(result.assignments, config.kmeans.min_cluster_size)

    # Центроиды только выживших кластеров, в порядке новых номеров
    sizes = np.bincount(result.assignments, minlength=config.kmeans.K)
    survivors = np.flatnonzero(sizes >= config.kmeans.min_cluster_size)
    FeatureService.save_features(
        FeatureService.from_array(result.centroids[survivors]),
        config.paths.artifact(CENTROIDS),
    )
    ClusteringService.save_assignments(parents, config.paths.artifact(PARENTS))
    write_csv(
        config.paths.artifact(KMEANS_TRACE),
        ("iteration", "objective"),
        enumerate(result.objective_trace),
    )
    _write_manifest(
        "cluster",
        config,
        started,
        [CENTROIDS, PARENTS, KMEANS_TRACE],
        {
            "iterations": result.n_iter,
            "K": config.kmeans.K,
            "K_after_pruning": int(survivors.size),
            "reseeds": [asdict(event) for event in result.reseed_events],
        },
    )


@log_execution_time
def handle_graph(config: PipelineConfig) -> None:
    """kNN внутри родительских кластеров, дочерние кластеры и граф."""
    started = time.perf_counter()
    store = _normalized_features(config)
    meta = FeatureService.load_meta(_require(config.paths.meta_path(), "synth"))
    parents = ClusteringService.load_assignments(
        _require(config.paths.artifact(PARENTS), "cluster"), store.n
    )

    lists = NeighborService.knn_within_cluster(store, parents, config.neighbors, config.workers)
    mutual = NeighborService.mutual_graph(lists)
    children = NeighborService.find_child_clusters(mutual, config.neighbors.g, config.workers)
    if config.neighbors.max_memberships is not None:
        children = NeighborService.limit_memberships(children, config.neighbors.max_memberships)

    nodes = FeatureService.attach(meta, store)
    graph = GraphService.build_graph(
        nodes, parents, children, GraphService.tracks_from_nodes(nodes), dim=store.d
    )
    GraphService.save_graph(graph, config.paths.artifact(GRAPH))
    _write_manifest(
        "graph",
        config,
        started,
        [GRAPH],
        {
            "child_clusters": len(children),
            "inter_edges": len(graph.inter_edges()),
            "intra_edges": len(graph.intra_edges()),
            "clamped_clusters": len(lists.clamped),
        },
    )


@log_execution_time
def handle_pairs(config: PipelineConfig) -> None:
    """Положительные пары режима ``pairs.mode``."""
    started = time.perf_counter()
    graph = GraphService.load_graph(_require(config.paths.artifact(GRAPH), "graph"))
    dataset = TransitivityService.build_pair_dataset(graph, config.pairs, workers=config.workers)
    TransitivityService.save_pairs(dataset.pairs, config.paths.artifact(PAIRS))
    _write_manifest(
        "pairs",
        config,
        started,
        [PAIRS],
        {
            "mode": config.pairs.mode,
            "relations": TransitivityService.relation_histogram(dataset.pairs),
        },
    )


@log_execution_time
def handle_triplets(config: PipelineConfig) -> None:
    """Материализует поток батчей триплетов на ``train.iterations`` шагов."""
    started = time.perf_counter()
    graph = GraphService.load_graph(_require(config.paths.artifact(GRAPH), "graph"))
    pairs = TransitivityService.load_pairs(_require(config.paths.artifact(PAIRS), "pairs"))
    epochs = SamplerService.epochs_for(
        len(pairs), config.batches.batch_size, config.train.iterations, config.batches.epochs
    )
    ordering_pool = (
        SamplerService.ordering_pool(graph) if config.batches.ordering_fraction > 0 else []
    )
    resamples: list = []
    stream = SamplerService.sample_triplets(
        pairs,
        graph.parent_of,
        config.batches,
        epochs=epochs,
        ordering_pool=ordering_pool,
        resample_log=resamples,
    )
    count = SamplerService.save_batches(stream, config.paths.artifact(TRIPLETS))
    _write_manifest(
        "triplets",
        config,
        started,
        [TRIPLETS],
        {"epochs": epochs, "triplets": count, "resamples": len(resamples)},
    )


@log_execution_time
def handle_train(config: PipelineConfig) -> None:
    """Обучает модель вложений по файлу триплетов."""
    started = time.perf_counter()
    store = _normalized_features(config)
    batches = SamplerService.load_batches(_require(config.paths.artifact(TRIPLETS), "triplets"))
    model = EvalService.initial_model(config, store.d)
    trained, trace = MetricService.train(model, batches, store, config.train)
    MetricService.save_checkpoint(trained, config.paths.artifact(CHECKPOINT))
    MetricService.save_loss_trace(trace, config.paths.artifact(LOSS_TRACE))
    _write_manifest(
        "train",
        config,
        started,
        [CHECKPOINT, LOSS_TRACE],
        {"steps": len(trace)},
    )


@log_execution_time
def handle_eval(config: PipelineConfig) -> None:
    """Отчёт оценки и таблица режимов."""
    started = time.perf_counter()
    store = _normalized_features(config)
    graph = GraphService.load_graph(_require(config.paths.artifact(GRAPH), "graph"), store)
    truth = SynthService.load_ground_truth(_require(config.paths.ground_truth_path(), "synth"))
    model = MetricService.load_checkpoint(_require(config.paths.artifact(CHECKPOINT), "train"))

    report, modes = EvalService.evaluate(graph, store, truth, model, config, config.workers)
    EvalService.save_report(report, config.paths.artifact(REPORT))
    EvalService.save_modes_csv(modes, config.eval.ks, config.paths.artifact(MODES))
    _write_manifest("eval", config, started, [REPORT, MODES])


PIPELINE_STAGES: Dict[str, Callable[[PipelineConfig], None]] = {
    "synth": handle_synth,
    "cluster": handle_cluster,
    "graph": handle_graph,
    "pairs": handle_pairs,
    "triplets": handle_triplets,
    "train": handle_train,
    "eval": handle_eval,
}


@log_execution_time
def handle_pipeline(config: PipelineConfig) -> None:
    """
    Запускает все этапы по порядку.

    Если признаки заданы внешним файлом (``paths.features``), этап synth
    пропускается.
    """
    started = time.perf_counter()
    logger.info("=" * 60)
    logger.info(f"Конвейер: пресет {config.preset}, зерно {config.master_seed}")
    logger.info("=" * 60)
    for stage, handler in PIPELINE_STAGES.items():
        if stage == "synth" and config.paths.features:
            logger.info("Внешние признаки заданы, synth пропущен")
            continue
        logger.info(f"▶ Этап {stage}")
        handler(config)
    _write_manifest("pipeline", config, started, [REPORT])


def handle_schema(config: PipelineConfig) -> None:
    """Печатает JSON схему конфигурации конвейера в stdout."""
    sys.stdout.write(
        json.dumps(PipelineConfig.model_json_schema(), ensure_ascii=False, indent=2) + "\n"
    )


COMMANDS: Dict[str, Callable[[PipelineConfig], None]] = {
    **PIPELINE_STAGES,
    "pipeline": handle_pipeline,
    "schema": handle_schema,
}

COMMAND_HELP = {
    "synth": "сгенерировать синтетический мир",
    "cluster": "сферический K-means и прореживание",
    "graph": "дочерние кластеры и граф сходства",
    "pairs": "положительные пары по транзитивности",
    "triplets": "батчи триплетов с негативами",
    "train": "обучение модели вложений",
    "eval": "отчёт оценки",
    "pipeline": "все этапы по порядку",
    "schema": "JSON схема конфигурации",
}


# =============================================================================
# РЕГИСТРАЦИЯ ПОДКОМАНД
# =============================================================================

def common_arguments() -> argparse.ArgumentParser:
    """Флаги, общие для всех подкоманд."""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", help="JSON файл конфигурации")
    parser.add_argument("--seed", type=int, help="главное зерно (u64)")
    parser.add_argument("--preset", choices=["paper", "desk"], help="набор значений по умолчанию")
    parser.add_argument("--workers", type=int, help="число рабочих потоков")
    parser.add_argument("--out", help="каталог артефактов")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="переопределить ключ конфигурации, например kmeans.K=20",
    )
    return parser


def register_handlers(
    subparsers: argparse._SubParsersAction,
    common: argparse.ArgumentParser
) -> None:
    """
    Регистрирует все подкоманды.

    Args:
        subparsers: Результат ``parser.add_subparsers()``.
        common: Родительский парсер с общими флагами.

    Example:
        >>> parser = argparse.ArgumentParser()
        >>> register_handlers(parser.add_subparsers(dest="command"), common_arguments())
    """
    for name, handler in COMMANDS.items():
        subparser = subparsers.add_parser(name, parents=[common], help=COMMAND_HELP[name])
        subparser.set_defaults(handler=handler)


@handle_exceptions
def dispatch(args: argparse.Namespace) -> None:
    """
    Собирает конфигурацию из флагов и вызывает обработчик подкоманды.

    Returns:
        int: Код выхода (через ``handle_exceptions``).
    """
    config = build_pipeline_config(
        preset=args.preset,
        config_path=args.config,
        overrides=args.overrides,
        master_seed=args.seed,
        workers=args.workers,
        out_dir=args.out,
    )
    if args.command != "schema":
        logger.info(
            f"Команда {args.command}: out={config.paths.out_dir}, "
            f"workers={config.workers}, config={config.config_hash()[:12]}"
        )
    args.handler(config)
