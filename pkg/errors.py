"""
Иерархия исключений PanicleLab и коды выхода CLI.
"""

# Коды выхода командной строки
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA_ERROR = 2
EXIT_STAGE_FAILURE = 3


class PanicleError(ValueError):
    """Базовая ошибка обработки данных."""


class FormatError(PanicleError):
    """Некорректный или неподдерживаемый файл."""


class PlyParseError(FormatError):
    """Ошибка разбора PLY с указанием смещения в байтах."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (смещение {offset} байт)")
        self.offset = offset


class DegenerateGeometryError(PanicleError):
    """Вырожденная геометрия: совпадающие точки, параллельные лучи и т.п."""


class ConnectivityError(PanicleError):
    """Граф k-NN распался на несколько компонент."""

    def __init__(self, n_components: int):
        super().__init__(f"Граф k-NN несвязный: {n_components} компонент")
        self.n_components = n_components


class NoLabelFoundError(PanicleError):
    """Ни один кластер не прошёл проверку планарности метки."""


class EmptyResultError(PanicleError):
    """После фильтрации ничего не осталось."""


class ConfigError(PanicleError):
    """Ошибка конфигурации пайплайна."""


class StageError(PanicleError):
    """Сбой конкретного этапа пайплайна."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"Этап '{stage}' завершился ошибкой: {cause}")
        self.stage = stage
        self.cause = cause

    def to_dict(self) -> dict:
        return {
            'stage': self.stage,
            'error_type': type(self.cause).__name__,
            'message': str(self.cause),
            'offset': getattr(self.cause, 'offset', None),
        }

