"""Exception types shared across the package.

Two broad families matter to callers: :class:`ConfigError` for malformed
documents or arguments, and :class:`PhysicsDiagnostic` for situations where
a simulation refuses to return a number it cannot stand behind (near-resonant
labeling, failed bracketing, unreachable operating points). The CLI maps the
first family to exit status 2 and the second to exit status 3.
"""


class CouplerLabError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CouplerLabError):
    """A document, argument, or device description is malformed."""


class PhysicsDiagnostic(CouplerLabError):
    """A simulation declined to produce a silently unreliable value."""


class LabelingAmbiguityError(PhysicsDiagnostic):
    """Dressed-state labeling fell below the overlap threshold (near resonance)."""


class NoSignChangeError(PhysicsDiagnostic):
    """Root bracketing failed: the function does not change sign across the bracket."""


class ConvergenceError(PhysicsDiagnostic):
    """An iterative search exhausted its evaluation budget."""


class UnreachableTargetError(PhysicsDiagnostic):
    """A control knob cannot reach the requested operating condition."""


class CalibrationError(PhysicsDiagnostic):
    """A calibration finished outside its declared tolerances."""
