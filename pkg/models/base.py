from dataclasses import asdict, fields
from typing import Any, Optional


class ConfigurationError(ValueError):
    """Raised when a config, spec or shape violates an invariant.

    ``field`` is the dotted path of the offending value (``"policy.bits"``)
    when one is known.
    """

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class BaseModel:
    """Shared helpers for the frozen dataclasses under ``models``.

    Children implement ``validate`` and raise ``ConfigurationError``; the
    ``section`` attribute names the config section used in field paths.
    """

    section: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        return True

    def field_path(self, name: str) -> str:
        return f"{self.section}.{name}" if self.section else name

    def fail(self, name: str, message: str):
        raise ConfigurationError(message, self.field_path(name))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]
