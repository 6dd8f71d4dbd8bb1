from __future__ import annotations

from typing import Any, Dict, Optional


class EsrTwinError(Exception):
    """Base class of every error raised by esrtwin."""

    kind = "error"

    def __init__(self, message: str, **diagnostics: Any) -> None:
        super().__init__(message)
        self.diagnostics: Dict[str, Any] = diagnostics


class ConfigError(EsrTwinError, ValueError):
    kind = "schema"

    def __init__(self, message: str, path: str = "", **diagnostics: Any) -> None:
        super().__init__(message, **diagnostics)
        self.path = path

    def __str__(self) -> str:
        base = super().__str__()
        return f"{self.path}: {base}" if self.path else base


class ValidationError(EsrTwinError, ValueError):
    kind = "validation"


class NumericalError(EsrTwinError, RuntimeError):
    """Non-convergence, integrator failure or quadrature failure.

    The keyword diagnostics (last iterate, achieved tolerance, ...) are kept on
    `self.diagnostics` and appended to the message.
    """

    kind = "numeric"

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{k}={v!r}" for k, v in sorted(self.diagnostics.items()))
        return f"{base} ({details})"


class NotFoundError(NumericalError):
    kind = "not_found"


class DataFormatError(EsrTwinError, ValueError):
    kind = "format"

    def __init__(self, message: str, source: Optional[str] = None, **diagnostics: Any) -> None:
        super().__init__(message, **diagnostics)
        self.source = source


class ManifestError(EsrTwinError, OSError):
    kind = "manifest"
