from __future__ import annotations

from typing import Sequence


class VoltControlError(Exception):
    """Base class for every error raised by voltcontrol."""


class CaseError(VoltControlError):
    def __init__(self, message: str, *, line: int | None = None, violations: Sequence[str] = ()):
        self.line = line
        self.violations = list(violations)
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProfileError(VoltControlError):
    pass


class ConfigError(VoltControlError):
    pass


class PowerFlowError(VoltControlError):
    pass


class SingularJacobianError(PowerFlowError):
    pass


class SvrError(VoltControlError):
    pass


class OpfError(VoltControlError):
    pass


class OpfBuildError(OpfError):
    pass


class OracleError(VoltControlError):
    pass


class SimulationError(VoltControlError):
    # kind is "power_flow" or "opf"; the CLI maps it to an exit code
    def __init__(self, message: str, *, time_s: float | None = None, kind: str = "power_flow"):
        self.time_s = time_s
        self.kind = kind
        if time_s is not None:
            message = f"t={time_s:g} s: {message}"
        super().__init__(message)


class TraceMismatchError(VoltControlError):
    pass
