"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
DataFormatError and OSError -> 4.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class NumericError(RuntimeError):
    """Numeric failure (singular matrix, divergence, infeasible scenario).

    Carries optional phase / timestep context so the CLI can report where a
    filtering run died.
    """

    def __init__(self, message: str, *, phase: str | None = None, step: int | None = None):
        self.phase = phase
        self.step = step
        ctx = []
        if phase is not None:
            ctx.append(f"phase={phase}")
        if step is not None:
            ctx.append(f"step={step}")
        if ctx:
            message = f"{message} [{', '.join(ctx)}]"
        super().__init__(message)


class DataFormatError(ValueError):
    """Malformed data file (bad header, ragged rows, non-numeric cells)."""
