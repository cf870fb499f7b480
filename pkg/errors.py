"""
TIVG Pipeline - Модуль исключений.

Иерархия ошибок конвейера. Каждое исключение знает свой код выхода,
который CLI возвращает операционной системе:

    0 - успех,
    1 - ошибка валидации (данные, конфигурация, формат файла),
    2 - ошибка выполнения (расхождение обучения, прочие сбои).

Example:
    Проверка данных с указанием строки::

        from errors import DataValidationError
        raise DataValidationError("нулевая норма", row=17)

Author: TIVG Team
License: MIT
Version: 1.0.0
"""

from typing import Optional


class PipelineError(Exception):
    """
    Базовая ошибка конвейера.

    Attributes:
        exit_code: Код выхода процесса для этой категории ошибок.
    """

    exit_code: int = 2


class DataValidationError(PipelineError, ValueError):
    """
    Нарушен контракт входных данных.

    Attributes:
        item_id: Идентификатор проблемного объекта (узла, кластера), если известен.
        row: Номер строки матрицы признаков, если ошибка относится к строке.
    """

    exit_code = 1

    def __init__(
        self,
        message: str,
        *,
        item_id: Optional[int] = None,
        row: Optional[int] = None
    ) -> None:
        self.item_id = item_id
        self.row = row
        details = []
        if item_id is not None:
            details.append(f"id={item_id}")
        if row is not None:
            details.append(f"row={row}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")


class ConfigurationError(DataValidationError):
    """Недопустимая комбинация параметров (например, n < K)."""


class ParseError(DataValidationError):
    """
    Файл артефакта повреждён или имеет неверный формат.

    Attributes:
        line: Номер строки (с единицы) для JSON-lines файлов.
    """

    def __init__(self, message: str, *, line: Optional[int] = None) -> None:
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class BatchCompositionError(DataValidationError):
    """В мини-батче нет допустимого негатива для одной из пар."""


class TrainingError(PipelineError):
    """
    Обучение прервано (нефинитная функция потерь).

    Attributes:
        batch_index: Индекс батча, на котором произошёл сбой.
    """

    def __init__(self, message: str, *, batch_index: int) -> None:
        self.batch_index = batch_index
        super().__init__(f"{message} (batch={batch_index})")
