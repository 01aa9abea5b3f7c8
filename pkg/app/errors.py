from typing import Optional


class KGICError(Exception):
    """Base class for every error the engine raises on purpose"""


class DataFormatError(KGICError):
    """Malformed or unreadable input file"""

    def __init__(self, path, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class AlignmentError(KGICError):
    pass


class ConfigError(KGICError):
    pass


class CheckpointError(KGICError):
    pass


class MetricError(KGICError):
    pass


class NonFiniteError(KGICError):
    """A tensor picked up NaN or inf values"""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite values in '{name}'")


class DivergenceError(KGICError):
    """Training loss became NaN; carries the last good parameter state"""

    def __init__(self, message: str, last_good_state=None, checkpoint_path=None):
        self.last_good_state = last_good_state
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class ColdStartError(KGICError):
    """A user has no train positives, so no local seed exists"""


class IsolatedNodeError(KGICError):
    """An object has no co-occurring items, so no non-local seed exists"""
