"""
TIVG Pipeline - Модуль форматов хранения.

Этот модуль содержит кодеки артефактов на диске:

* бинарный формат матриц TIVG (признаки, центроиды, веса модели);
* JSON-lines с номерами строк в сообщениях об ошибках;
* JSON отчёты/манифесты и CSV таблицы.

Запись детерминирована: одинаковые данные дают побайтно одинаковые файлы.

Формат TIVG::

    magic   4 байта  b"TIVG"
    version uint32 LE  (1 - float32, 2 - float64)
    n       uint64 LE
    d       uint32 LE
    data    n*d значений IEEE-754 LE, построчно

Example:
    Сохранение и чтение матрицы::

        from storage import read_matrix, write_matrix
        write_matrix(path, matrix)
        same = read_matrix(path)

Author: TIVG Team
License: MIT
Version: 1.0.0
"""

import csv
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Sequence, Tuple, Type, Union

import numpy as np
from loguru import logger

from errors import ParseError

PathLike = Union[str, Path]


# =============================================================================
# БИНАРНЫЙ ФОРМАТ МАТРИЦ
# =============================================================================

TIVG_MAGIC = b"TIVG"
TIVG_HEADER = struct.Struct("<4sIQI")

# Версия формата определяет тип значений
VERSION_FLOAT32 = 1
VERSION_FLOAT64 = 2
_VERSION_DTYPES: Dict[int, str] = {
    VERSION_FLOAT32: "<f4",
    VERSION_FLOAT64: "<f8",
}


def write_matrix(
    path: PathLike,
    matrix: np.ndarray,
    version: int = VERSION_FLOAT32
) -> None:
    """
    Записывает двумерную матрицу в формате TIVG.

    Args:
        path: Путь к файлу (каталоги создаются).
        matrix: Матрица n x d.
        version: 1 - float32, 2 - float64.

    Raises:
        ValueError: Если матрица не двумерная или версия неизвестна.
    """
    if version not in _VERSION_DTYPES:
        raise ValueError(f"неизвестная версия TIVG: {version}")
    array = np.asarray(matrix)
    if array.ndim != 2:
        raise ValueError(f"ожидалась двумерная матрица, получено ndim={array.ndim}")

    payload = np.ascontiguousarray(array, dtype=_VERSION_DTYPES[version])
    n, d = payload.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(TIVG_HEADER.pack(TIVG_MAGIC, version, n, d))
        handle.write(payload.tobytes(order="C"))

    logger.debug(f"TIVG v{version} записан: {path} ({n}x{d})")


def read_matrix(path: PathLike) -> np.ndarray:
    """
    Читает матрицу TIVG.

    Args:
        path: Путь к файлу.

    Returns:
        np.ndarray: float32 для версии 1, float64 для версии 2.

    Raises:
        ParseError: Неверная сигнатура, версия или размер данных.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < TIVG_HEADER.size:
        raise ParseError(f"{path}: файл короче заголовка TIVG")

    magic, version, n, d = TIVG_HEADER.unpack_from(raw)
    if magic != TIVG_MAGIC:
        raise ParseError(f"{path}: неверная сигнатура {magic!r}")
    if version not in _VERSION_DTYPES:
        raise ParseError(f"{path}: неподдерживаемая версия {version}")

    dtype = np.dtype(_VERSION_DTYPES[version])
    expected = TIVG_HEADER.size + n * d * dtype.itemsize
    if len(raw) != expected:
        raise ParseError(
            f"{path}: размер {len(raw)} байт не совпадает с заголовком "
            f"n={n}, d={d} (ожидалось {expected})"
        )

    data = np.frombuffer(raw, dtype=dtype, count=n * d, offset=TIVG_HEADER.size)
    return data.reshape(n, d).astype(dtype.newbyteorder("="), copy=True)


# =============================================================================
# JSON-LINES
# =============================================================================

def _dump_line(record: Dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> int:
    """
    Записывает записи по одной на строку.

    Args:
        path: Путь к файлу (каталоги создаются).
        records: Словари; порядок ключей сохраняется.

    Returns:
        int: Число записанных строк.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(_dump_line(record))
            handle.write("\n")
            count += 1
    logger.debug(f"JSON-lines записан: {path} ({count} строк)")
    return count


def iter_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """
    Итерирует записи JSON-lines вместе с номером строки.

    Пустые строки пропускаются.

    Args:
        path: Путь к файлу.

    Yields:
        Tuple[int, dict]: Номер строки (с единицы) и запись.

    Raises:
        ParseError: Строка не является JSON объектом.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: некорректный JSON ({exc.msg})", line=line_number)
            if not isinstance(record, dict):
                raise ParseError(f"{path}: ожидался JSON объект", line=line_number)
            yield line_number, record


def require_field(
    record: Dict[str, Any],
    key: str,
    expected: Union[Type, Tuple[Type, ...]],
    line: int
) -> Any:
    """
    Достаёт обязательное поле записи с проверкой типа.

    ``bool`` не принимается там, где ожидается ``int``.

    Raises:
        ParseError: Поля нет или тип не совпадает.
    """
    if key not in record:
        raise ParseError(f"нет поля '{key}'", line=line)
    value = record[key]
    if isinstance(value, bool) and expected is not bool:
        raise ParseError(f"поле '{key}' имеет тип bool", line=line)
    if not isinstance(value, expected):
        raise ParseError(
            f"поле '{key}' имеет тип {type(value).__name__}", line=line
        )
    return value


# =============================================================================
# JSON И CSV
# =============================================================================

def write_json(path: PathLike, payload: Any) -> None:
    """
    Записывает JSON с отсортированными ключами и отступами.

    Raises:
        ValueError: В данных есть NaN или бесконечность.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2, allow_nan=False) + "\n",
        encoding="utf-8",
    )


def read_json(path: PathLike) -> Any:
    """
    Читает JSON файл.

    Raises:
        ParseError: Файл не является корректным JSON.
    """
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: некорректный JSON ({exc.msg})", line=exc.lineno)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Записывает CSV с заголовком; числа с плавающей точкой через repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(value) for value in row])


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    """Читает CSV в список словарей (значения строками)."""
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def _format_cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value
