from __future__ import annotations

import json


class CrisisKitError(Exception):
    """
    Base error for every stage. `code` is the machine-readable tag the CLI
    prints, `detail` the human message, `exit_code` what the process returns.
    """

    code = "error"
    exit_code = 1

    def __init__(self, detail: str, *, code: str | None = None):
        super().__init__(detail)
        self.detail = detail
        if code:
            self.code = code

    def one_line(self) -> str:
        return json.dumps({"error": self.code, "detail": self.detail}, sort_keys=True)


class ConfigError(CrisisKitError):
    code = "config"


class DataError(CrisisKitError):
    code = "data"


class MissingInputError(CrisisKitError):
    code = "missing_input"


class ShapeError(CrisisKitError):
    code = "shape"


class NumericalError(CrisisKitError):
    code = "numerical"


class DivergenceError(NumericalError):
    code = "diverged"

    def __init__(self, detail: str = "diverged", *, code: str | None = None):
        super().__init__(detail, code=code)


class EmptySequenceError(ShapeError):
    code = "empty_sequence"

    def __init__(self, detail: str = "empty sequence", *, code: str | None = None):
        super().__init__(detail, code=code)
