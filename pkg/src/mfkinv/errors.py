"""Exception hierarchy shared by every module."""


class KalmanInversionError(Exception):
    """Base class for all errors raised by mfkinv."""


class NotSPD(KalmanInversionError):
    """A matrix expected to be symmetric positive definite is not."""


class DegenerateEnsemble(KalmanInversionError):
    """Ensemble has fewer than two particles."""


class RankDeficient(KalmanInversionError):
    """Ensemble spread has insufficient rank for the requested update."""


class SingularPrecision(KalmanInversionError):
    """Posterior precision matrix is numerically singular."""


class SingularInnovation(KalmanInversionError):
    """Innovation covariance could not be factorized."""


class InvalidGamma(KalmanInversionError):
    """Step parameter gamma must be strictly positive."""


class InvalidStep(KalmanInversionError):
    """MCMC proposal step outside its admissible range."""


class InvalidConfig(KalmanInversionError):
    """Run configuration is inconsistent."""


class RankExceeded(KalmanInversionError):
    """Requested low-rank truncation exceeds the numerical rank."""


class ShapeMismatch(KalmanInversionError):
    """Two problems that must share dimensions do not."""


class SolverFailure(KalmanInversionError):
    """Forward PDE solve did not produce a finite solution."""


class MismatchedProblem(KalmanInversionError):
    """Artifacts being compared were produced on different problems."""


class Divergence(KalmanInversionError):
    """Iteration produced non-finite or exploding values."""
