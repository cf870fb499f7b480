"""
TIVG Pipeline - Модуль middleware.

Этот модуль содержит декораторы, которые оборачивают обработчики
подкоманд: логирование времени выполнения и перевод исключений
в коды выхода с однострочной JSON ошибкой в stderr.

Модуль соответствует стандартам PEP8 и PEP257.

Example:
    Обёртка обработчика::

        from middleware import handle_exceptions, log_execution_time

        @handle_exceptions
        @log_execution_time
        def handle_cluster(config):
            ...

Author: TIVG Team
License: MIT
Version: 1.0.0
"""

import json
import sys
import time
from functools import wraps
from typing import Any, Callable

from loguru import logger
from pydantic import ValidationError

from errors import PipelineError

# Коды выхода процесса
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def exit_code_for(exc: BaseException) -> int:
    """
    Код выхода для исключения.

    Args:
        exc: Пойманное исключение.

    Returns:
        int: 1 для ошибок валидации (данные, конфигурация, отсутствующие
        входы), 2 для остальных.
    """
    if isinstance(exc, PipelineError):
        return exc.exit_code
    if isinstance(exc, (ValidationError, FileNotFoundError, NotADirectoryError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def error_line(exc: BaseException, exit_code: int) -> str:
    """Однострочное JSON описание ошибки."""
    return json.dumps(
        {"error": type(exc).__name__, "exit_code": exit_code, "message": str(exc)},
        ensure_ascii=False,
    )


def log_execution_time(func: Callable) -> Callable:
    """
    Декоратор для логирования времени выполнения этапа.

    Args:
        func: Функция для декорирования.

    Returns:
        Callable: Декорированная функция.

    Example:
        >>> @log_execution_time
        ... def handle_pairs(config):
        ...     pass
    """
    @wraps(func)
    def wrapper(*args, **kwargs) -> Any:
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        elapsed = time.perf_counter() - start_time

        logger.info(f"⏱ {func.__name__} выполнена за {elapsed:.3f}с")

        return result

    return wrapper


def handle_exceptions(func: Callable[..., Any]) -> Callable[..., int]:
    """
    Декоратор для обработки исключений подкоманды.

    Логирует ошибку и печатает в stderr одну строку JSON
    ``{"error", "exit_code", "message"}`` вместо трассировки.

    Args:
        func: Функция для декорирования.

    Returns:
        Callable: Функция, возвращающая код выхода (0/1/2).

    Example:
        >>> @handle_exceptions
        ... def dispatch(args):
        ...     pass
    """
    @wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            result = func(*args, **kwargs)
        except KeyboardInterrupt:
            logger.warning("Получен сигнал прерывания (Ctrl+C)")
            raise
        except Exception as exc:
            code = exit_code_for(exc)
            if code == EXIT_VALIDATION:
                logger.error(f"Ошибка валидации в {func.__name__}: {exc}")
            else:
                logger.opt(exception=exc).critical(f"Ошибка выполнения в {func.__name__}: {exc}")
            sys.stderr.write(error_line(exc, code) + "\n")
            sys.stderr.flush()
            return code
        return EXIT_OK if result is None else int(result)

    return wrapper
