"""Exception types shared across the package."""


class NessRbmError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(NessRbmError):
    """Malformed configuration file, unknown key, or invalid value."""


class TooLarge(NessRbmError):
    """Requested exact computation exceeds the feasible system size."""


class DegenerateNess(NessRbmError):
    """The Liouvillian nullspace is not one-dimensional."""


class NotADensityMatrix(NessRbmError):
    """Hermiticity or trace checks failed beyond tolerance."""


class ZeroState(NessRbmError):
    """A density-operator vector with vanishing norm was supplied."""


class NonFiniteAmplitude(NessRbmError):
    """The ansatz produced a non-finite log amplitude."""


class ZeroWeightSum(NessRbmError):
    """All Monte-Carlo weights vanished; the estimate is undefined."""


class SingularS(NessRbmError):
    """The regularized S matrix could not be solved."""


class BacktrackOverflow(NessRbmError):
    """Backtracking exceeded the Lipschitz-estimate ceiling."""


class FitDiverged(NessRbmError):
    """The exponential fit failed to produce finite parameters."""


class IncompatibleRuns(NessRbmError):
    """Run directories with mismatched model specifications."""
