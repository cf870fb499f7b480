#!/usr/bin/env python3
"""
TIVG Pipeline - Точка входа приложения.

Этот модуль является главной точкой входа CLI конвейера: настраивает
логирование, разбирает аргументы командной строки и запускает
подкоманду. Код выхода: 0 - успех, 1 - ошибка валидации,
2 - ошибка выполнения.

Модуль соответствует стандартам PEP8 и PEP257.

Usage:
    Полный конвейер на синтетических данных::

        $ python main.py pipeline --preset desk --seed 7 --out runs/demo

    Отдельные этапы::

        $ python main.py synth --out runs/demo
        $ python main.py cluster --out runs/demo --set kmeans.K=20

Author: TIVG Team
License: MIT
Version: 1.0.0
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

# =============================================================================
# НАСТРОЙКА ПУТЕЙ
# =============================================================================

# Добавляем корневую директорию проекта в PATH
PROJECT_ROOT = Path(__file__).parent
sys.path.insert(0, str(PROJECT_ROOT))

from config import settings  # noqa: E402
from handlers import common_arguments, dispatch, register_handlers  # noqa: E402


# =============================================================================
# ЛОГИРОВАНИЕ
# =============================================================================

def configure_logging() -> None:
    """
    Настраивает обработчики loguru.

    Консольный вывод идёт в stderr (stdout остаётся для вывода команд),
    файловый лог - в ``settings.log_dir`` с ротацией.
    """
    logger.remove()  # Удаляем стандартный обработчик

    # Консольный вывод
    logger.add(
        sys.stderr,
        format=(
            "<level>{level: <8}</level> | "
            "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - "
            "<level>{message}</level>"
        ),
        level="DEBUG" if settings.debug else settings.log_level,
        colorize=True
    )

    # Файловый лог
    log_dir = Path(settings.log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    logger.add(
        str(log_dir / "tivg.log"),
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
        level="DEBUG",
        rotation="500 MB",
        retention="7 days",
        compression="zip"
    )


# =============================================================================
# АРГУМЕНТЫ КОМАНДНОЙ СТРОКИ
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    """
    Создаёт парсер аргументов со всеми подкомандами.

    Returns:
        argparse.ArgumentParser: Парсер ``tivg <command> [flags]``.
    """
    parser = argparse.ArgumentParser(
        prog="tivg",
        description=f"{settings.app_name} v{settings.app_version}",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True
    register_handlers(subparsers, common_arguments())
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """
    Разбирает аргументы и выполняет подкоманду.

    Args:
        argv: Аргументы без имени программы; по умолчанию ``sys.argv[1:]``.

    Returns:
        int: Код выхода.

    Example:
        >>> run(["pipeline", "--preset", "desk", "--out", "runs/demo"])
        0
    """
    args = build_parser().parse_args(argv)
    return dispatch(args)


def main() -> None:
    """
    Главная функция приложения.

    Example:
        >>> if __name__ == "__main__":
        ...     main()
    """
    configure_logging()
    logger.debug(f"{settings.app_name} v{settings.app_version} ({settings.environment})")
    sys.exit(run())


# =============================================================================
# ТОЧКА ВХОДА
# =============================================================================

if __name__ == "__main__":
    main()
