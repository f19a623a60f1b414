"""Exception types shared across the package."""


class CSAFQMCError(Exception):
    """Base class for package errors."""


class DimensionError(CSAFQMCError, ValueError):
    """Operands act on incompatible numbers of qubits or modes."""


class ValidationError(CSAFQMCError, ValueError):
    """Input data violates a documented invariant."""


class ParseError(CSAFQMCError, ValueError):
    """Malformed FCIDUMP or config input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NotPSDError(CSAFQMCError, ValueError):
    """Two-electron supermatrix has a pivot below ``-tol``."""


class ConvergenceError(CSAFQMCError, RuntimeError):
    """Iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        self.residual = residual
        super().__init__(f"{message} (best residual {residual:.3e})")


class ParticleSectorViolation(CSAFQMCError):
    """Back-rotated trial state spans more than one (n_alpha, n_beta) sector."""

    def __init__(self, expected, found):
        self.expected = None if expected is None else tuple(expected)
        self.found = sorted({tuple(f) for f in found})
        want = "the expected" if self.expected is None else f"the {self.expected}"
        super().__init__(
            f"trial state is not confined to {want} particle sector; "
            f"sectors present: {self.found}. The contextual-subspace ground state "
            "lies in the wrong particle sector after back-rotation (small-subspace failure mode)."
        )


class UnsupportedFrameError(CSAFQMCError, ValueError):
    """Stabilizer rotations are not of the single-Y form handled by the commutation rule."""


class WeightCollapseError(CSAFQMCError, RuntimeError):
    """Total walker weight fell below the abort threshold."""


class ConfigError(CSAFQMCError, ValueError):
    """Invalid estimator or run configuration."""
