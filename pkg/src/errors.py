"""
ControlSR error hierarchy.
Every failure raised by the package derives from ControlSRError so callers
(the CLI in particular) can map it to an exit code.
"""
from typing import Optional


class ControlSRError(Exception):
    """Base class for all ControlSR failures"""


class ValidationError(ControlSRError, ValueError):
    """Bad shapes, ranges or geometry"""


class ConfigError(ValidationError):
    """Invalid configuration value; carries the offending key"""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class ParseError(ControlSRError):
    """Malformed file contents; carries the byte offset where parsing failed"""

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        where = f" at offset {offset}" if offset is not None else ""
        source = f"{path}: " if path else ""
        super().__init__(f"{source}{message}{where}")
        self.offset = offset
        self.path = path


class UsageError(ControlSRError):
    """Operation called in the wrong stage or with the wrong arguments"""


class PrerequisiteError(ControlSRError):
    """A training stage was started without its prior-stage checkpoint"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


class FreezeViolation(ControlSRError):
    """A frozen tensor changed during an optimization step"""
