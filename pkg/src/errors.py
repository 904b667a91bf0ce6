from __future__ import annotations

from typing import Any


class MorphOptError(Exception):
    """Base class for every failure raised by this package."""

    exit_code = 1


class ConfigError(MorphOptError):
    exit_code = 2


class MeshError(MorphOptError):
    pass


class MeshFormatError(MeshError):
    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class NumericalError(MorphOptError):
    exit_code = 3


class SolverConvergenceError(NumericalError):
    def __init__(self, residual: float, iterations: int, message: str = "linear solve did not converge"):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (relative residual={residual:.3e}, iterations={iterations})")


class DegenerateSnapshotsError(NumericalError):
    pass


class PointLocationError(NumericalError):
    pass


class GeometricMorphingError(NumericalError):
    def __init__(self, inverted: list[int], message: str = "geometric morphing inverts elements"):
        self.inverted = inverted
        super().__init__(f"{message}: {len(inverted)} inverted triangle(s)")


class BacktrackingExhaustedError(NumericalError):
    def __init__(self, trace: Any, stationary: bool, attempts: int):
        self.trace = trace
        self.stationary = stationary
        self.attempts = attempts
        super().__init__(
            f"line search exhausted after {attempts} halvings (stationary={stationary})"
        )
