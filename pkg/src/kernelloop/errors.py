"""Exception hierarchy. Every domain failure the CLI maps to exit code 1 derives from KernelloopError."""


class KernelloopError(Exception):
    pass


class ShapeError(KernelloopError, ValueError):
    pass


class ConfigError(KernelloopError, ValueError):
    pass


class ContractError(KernelloopError, ValueError):
    """Inputs do not match a kernel's arity or shape contract."""


class DomainError(KernelloopError, ValueError):
    pass


class MeasurementError(KernelloopError):
    pass


class LookupFailure(KernelloopError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ParseError(KernelloopError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line


class ProfilingError(KernelloopError):
    pass


class PlanError(KernelloopError):
    pass


class ExtractionError(KernelloopError):
    pass


class BaselineError(KernelloopError):
    """The starter config failed verification; the loop refuses to optimize it."""


class StoreError(KernelloopError):
    pass


class MutatorError(KernelloopError):
    """The mutator itself is unusable (e.g. the command cannot be spawned)."""


class ProposalError(KernelloopError):
    """A single proposal was malformed; the loop logs it as a failed experiment."""


class ScoreError(KernelloopError):
    pass
