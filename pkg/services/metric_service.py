"""
TIVG Pipeline Services Module - Metric Learning Service
=======================================================

Модель вложений F(.), косинусное расстояние, функция ранжирования
с отступом и обучение стохастическим градиентным спуском.

    D(A, B) = 1 - F(A).F(B) / (|F(A)| |F(B)|)
    L(X, X+, X-) = max{0, D(X, X+) - D(X, X-) + m}

Градиенты аналитические; в точке излома берётся субградиент 0.

Author: TIVG Team
License: MIT
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from config import TrainConfig
from errors import DataValidationError, ParseError, TrainingError
from models import EmbeddingModel, FeatureStore, Triplet
from storage import VERSION_FLOAT64, read_json, read_matrix, write_csv, write_json, write_matrix

# Нормы вложений ниже порога считаются нулевыми
NORM_FLOOR = 1e-12

ARCHITECTURE_WEIGHTS: Dict[str, Tuple[str, ...]] = {
    "linear": ("W1", "b1"),
    "one_hidden": ("W1", "b1", "W2", "b2"),
}

MANIFEST_NAME = "manifest.json"

Arrays = Tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TraceRow:
    """Одна строка следа обучения."""

    iteration: int
    mean_loss: float
    active_fraction: float


# =============================================================================
# КОСИНУСНОЕ РАССТОЯНИЕ
# =============================================================================

def _row_norms(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=-1)
    if np.any(norms < NORM_FLOOR):
        row = int(np.flatnonzero(np.atleast_1d(norms < NORM_FLOOR))[0])
        raise DataValidationError(
            f"норма вектора меньше {NORM_FLOOR}, косинусное расстояние не определено",
            row=row,
        )
    return norms


def cosine_distances(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Построчные косинусные расстояния двух матриц одной формы."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    cosine = np.sum(U * V, axis=1) / (_row_norms(U) * _row_norms(V))
    return np.clip(1.0 - cosine, 0.0, 2.0)


def cosine_distance_grads(U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Построчные градиенты D(u, v) по u и по v."""
    nu = _row_norms(U)[:, None]
    nv = _row_norms(V)[:, None]
    u_hat, v_hat = U / nu, V / nv
    cosine = np.sum(u_hat * v_hat, axis=1, keepdims=True)
    grad_u = -(v_hat - cosine * u_hat) / nu
    grad_v = -(u_hat - cosine * v_hat) / nv
    return grad_u, grad_v


class MetricService:
    """
    Сервис обучения метрики.

    Методы:
        init_model: Инициализация Xavier
        embed: Прямой проход F(.)
        cosine_distance: Расстояние двух векторов
        ranking_loss / loss_gradient: Функция ранжирования и её градиент
        train: SGD по потоку батчей
        save_checkpoint / load_checkpoint: Хранение модели
    """

    @staticmethod
    def init_model(
        architecture: str,
        d_in: int,
        d_out: int,
        hidden: int = 4096,
        seed: int = 0
    ) -> EmbeddingModel:
        """
        Создаёт модель с весами из U(-a, a), a = sqrt(6 / (fan_in + fan_out)),
        и нулевыми смещениями.

        Args:
            architecture: ``linear`` или ``one_hidden``.
            d_in: Размерность признаков.
            d_out: Размерность вложения.
            hidden: Ширина скрытого слоя (для one_hidden).
            seed: Зерно.

        Raises:
            DataValidationError: Неизвестная архитектура.
        """
        if architecture not in ARCHITECTURE_WEIGHTS:
            raise DataValidationError(f"неизвестная архитектура: {architecture}")
        rng = np.random.default_rng(seed)

        def xavier(fan_out: int, fan_in: int) -> np.ndarray:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_out, fan_in))

        if architecture == "linear":
            weights = {"W1": xavier(d_out, d_in), "b1": np.zeros(d_out)}
        else:
            weights = {
                "W1": xavier(hidden, d_in),
                "b1": np.zeros(hidden),
                "W2": xavier(d_out, hidden),
                "b2": np.zeros(d_out),
            }
        return EmbeddingModel(architecture, weights, d_in=d_in, d_out=d_out, seed=seed)

    @staticmethod
    def _forward(model: EmbeddingModel, X: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        weights = model.weights
        pre = X @ weights["W1"].T + weights["b1"]
        if model.architecture == "linear":
            return pre, {}
        hidden = np.maximum(pre, 0.0)
        return hidden @ weights["W2"].T + weights["b2"], {"pre": pre, "hidden": hidden}

    @staticmethod
    def _backward(
        model: EmbeddingModel,
        X: np.ndarray,
        cache: Dict[str, np.ndarray],
        grad_out: np.ndarray
    ) -> Dict[str, np.ndarray]:
        if model.architecture == "linear":
            return {"W1": grad_out.T @ X, "b1": grad_out.sum(axis=0)}
        grad_hidden = grad_out @ model.weights["W2"]
        grad_pre = grad_hidden * (cache["pre"] > 0.0)
        return {
            "W1": grad_pre.T @ X,
            "b1": grad_pre.sum(axis=0),
            "W2": grad_out.T @ cache["hidden"],
            "b2": grad_out.sum(axis=0),
        }

    @staticmethod
    def embed(model: EmbeddingModel, feature: np.ndarray) -> np.ndarray:
        """
        Вычисляет вложение F(x) для вектора или матрицы признаков.

        Raises:
            DataValidationError: Неверная размерность или нефинитный вход.

        Example:
            >>> model = MetricService.init_model("linear", d_in=4, d_out=4)
            >>> model.weights["W1"] = np.eye(4)
            >>> MetricService.embed(model, np.ones(4))
            array([1., 1., 1., 1.])
        """
        X = np.asarray(feature, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != model.d_in:
            raise DataValidationError(
                f"размерность входа {X.shape[1]} не совпадает с d_in={model.d_in}"
            )
        if not np.isfinite(X).all():
            raise DataValidationError("нефинитные значения во входе модели")
        output, _ = MetricService._forward(model, X)
        return output[0] if single else output

    @staticmethod
    def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
        """
        Косинусное расстояние в диапазоне [0, 2].

        Raises:
            DataValidationError: Норма одного из векторов меньше 1e-12.

        Example:
            >>> MetricService.cosine_distance(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
            2.0
        """
        return float(cosine_distances(u, v)[0])

    @staticmethod
    def ranking_loss(model: EmbeddingModel, triplet_features: Arrays, m: float) -> float:
        """
        Значение max{0, D(X, X+) - D(X, X-) + m} для одного триплета.

        Args:
            model: Модель вложений.
            triplet_features: Признаки (X, X+, X-).
            m: Отступ.
        """
        losses, _ = MetricService.batch_loss_and_gradient(
            model, *(np.atleast_2d(x) for x in triplet_features), m, with_gradient=False
        )
        return float(losses[0])

    @staticmethod
    def loss_gradient(
        model: EmbeddingModel,
        triplet_features: Arrays,
        m: float
    ) -> Dict[str, np.ndarray]:
        """Аналитический градиент функции ранжирования одного триплета по весам."""
        _, grads = MetricService.batch_loss_and_gradient(
            model, *(np.atleast_2d(x) for x in triplet_features), m
        )
        return grads

    @staticmethod
    def batch_loss_and_gradient(
        model: EmbeddingModel,
        XA: np.ndarray,
        XP: np.ndarray,
        XN: np.ndarray,
        m: float,
        with_gradient: bool = True
    ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """
        Потери каждого триплета батча и средний по батчу градиент.

        Returns:
            Tuple[np.ndarray, dict]: Потери (B,) и градиенты по именам весов
            (пустой словарь при ``with_gradient=False``).
        """
        ZA, cache_a = MetricService._forward(model, XA)
        ZP, cache_p = MetricService._forward(model, XP)
        ZN, cache_n = MetricService._forward(model, XN)
        d_pos = cosine_distances(ZA, ZP)
        d_neg = cosine_distances(ZA, ZN)
        raw = d_pos - d_neg + m
        losses = np.maximum(raw, 0.0)
        if not with_gradient:
            return losses, {}

        # Излом (raw == 0) считается неактивным
        active = (raw > 0.0).astype(np.float64)[:, None]
        ga_pos, gp = cosine_distance_grads(ZA, ZP)
        ga_neg, gn = cosine_distance_grads(ZA, ZN)
        batch = XA.shape[0]
        grad_a = active * (ga_pos - ga_neg) / batch
        grad_p = active * gp / batch
        grad_n = -active * gn / batch

        grads = {name: np.zeros_like(value) for name, value in model.weights.items()}
        for X, cache, grad_out in (
            (XA, cache_a, grad_a),
            (XP, cache_p, grad_p),
            (XN, cache_n, grad_n),
        ):
            for name, value in MetricService._backward(model, X, cache, grad_out).items():
                grads[name] += value
        return losses, grads

    @staticmethod
    def triplet_arrays(store: FeatureStore, batch: Sequence[Triplet]) -> Arrays:
        """Признаки (X, X+, X-) батча триплетов."""
        return (
            store.rows([t.anchor for t in batch]),
            store.rows([t.positive for t in batch]),
            store.rows([t.negative for t in batch]),
        )

    @staticmethod
    def train(
        model: EmbeddingModel,
        batch_stream: Iterable[List[Triplet]],
        store: FeatureStore,
        config: TrainConfig
    ) -> Tuple[EmbeddingModel, List[TraceRow]]:
        """
        Обучение простым SGD по среднему градиенту батча.

        Обучение идёт по батчам потока до ``config.iterations`` шагов или до
        конца потока. Потеря записывается для каждого батча до шага.

        Args:
            model: Начальная модель (не изменяется).
            batch_stream: Батчи триплетов в порядке применения.
            store: Признаки узлов.
            config: Отступ, шаг и число итераций.

        Returns:
            Tuple[EmbeddingModel, List[TraceRow]]: Обученная копия и след потерь.

        Raises:
            DataValidationError: Размерность признаков не совпадает с моделью.
            TrainingError: Нефинитная потеря или вырожденное вложение.
        """
        if store.d != model.d_in:
            raise DataValidationError(
                f"размерность признаков {store.d} не совпадает с d_in={model.d_in}"
            )
        trained = model.copy()
        trace: List[TraceRow] = []

        for batch_index, batch in enumerate(batch_stream):
            if batch_index >= config.iterations:
                break
            XA, XP, XN = MetricService.triplet_arrays(store, batch)
            try:
                losses, grads = MetricService.batch_loss_and_gradient(
                    trained, XA, XP, XN, config.margin
                )
            except DataValidationError as exc:
                raise TrainingError(f"вырожденное вложение: {exc}", batch_index=batch_index)

            mean_loss = float(np.mean(losses))
            if not np.isfinite(mean_loss):
                raise TrainingError("нефинитная функция потерь", batch_index=batch_index)
            trace.append(
                TraceRow(
                    iteration=trained.iteration,
                    mean_loss=mean_loss,
                    active_fraction=float(np.mean(losses > 0.0)),
                )
            )

            if config.learning_rate > 0.0:
                for name, grad in grads.items():
                    trained.weights[name] = trained.weights[name] - config.learning_rate * grad
            trained.iteration += 1

            if batch_index % 100 == 0:
                logger.debug(f"Итерация {trained.iteration}: потеря {mean_loss:.5f}")

        if trace:
            logger.info(
                f"🎯 Обучение: {len(trace)} шагов, потеря {trace[0].mean_loss:.4f} -> "
                f"{trace[-1].mean_loss:.4f}"
            )
        else:
            logger.warning("Обучение: поток батчей пуст, модель не изменилась")
        return trained, trace

    # =========================================================================
    # ХРАНЕНИЕ МОДЕЛИ
    # =========================================================================

    @staticmethod
    def save_checkpoint(model: EmbeddingModel, directory: Union[str, Path]) -> None:
        """
        Сохраняет модель: manifest.json и TIVG v2 на каждый массив весов.

        Смещения хранятся как матрицы 1 x n.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, value in model.weights.items():
            write_matrix(directory / f"{name}.tivg", np.atleast_2d(value), version=VERSION_FLOAT64)
        write_json(
            directory / MANIFEST_NAME,
            {
                "architecture": model.architecture,
                "d_in": model.d_in,
                "d_out": model.d_out,
                "seed": model.seed,
                "iteration": model.iteration,
                "weights": list(model.weights),
            },
        )
        logger.info(f"💾 Модель сохранена: {directory} {model!r}")

    @staticmethod
    def load_checkpoint(directory: Union[str, Path]) -> EmbeddingModel:
        """
        Загружает модель.

        Raises:
            ParseError: Манифест неполон или форма весов не совпадает.
        """
        directory = Path(directory)
        manifest = read_json(directory / MANIFEST_NAME)
        for key in ("architecture", "d_in", "d_out", "seed", "iteration", "weights"):
            if key not in manifest:
                raise ParseError(f"{directory / MANIFEST_NAME}: нет поля '{key}'")
        architecture = manifest["architecture"]
        if architecture not in ARCHITECTURE_WEIGHTS:
            raise ParseError(f"неизвестная архитектура в манифесте: {architecture}")
        if tuple(manifest["weights"]) != ARCHITECTURE_WEIGHTS[architecture]:
            raise ParseError(f"набор весов {manifest['weights']} не соответствует {architecture}")

        weights: Dict[str, np.ndarray] = {}
        for name in manifest["weights"]:
            value = read_matrix(directory / f"{name}.tivg")
            weights[name] = value[0] if name.startswith("b") else value

        model = EmbeddingModel(
            architecture=architecture,
            weights=weights,
            d_in=int(manifest["d_in"]),
            d_out=int(manifest["d_out"]),
            seed=int(manifest["seed"]),
            iteration=int(manifest["iteration"]),
        )
        output_bias = weights[ARCHITECTURE_WEIGHTS[architecture][-1]]
        if weights["W1"].shape[1] != model.d_in or output_bias.shape[0] != model.d_out:
            raise ParseError(f"{directory}: форма весов не совпадает с манифестом")
        return model

    @staticmethod
    def save_loss_trace(trace: Sequence[TraceRow], path: Union[str, Path]) -> None:
        """CSV: iteration, mean_loss, active_fraction."""
        write_csv(
            path,
            ("iteration", "mean_loss", "active_fraction"),
            ((row.iteration, row.mean_loss, row.active_fraction) for row in trace),
        )
