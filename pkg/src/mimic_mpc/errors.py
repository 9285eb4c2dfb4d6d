"""Exception types shared across the package."""


class MimicMpcError(Exception):
    """Base class for all package errors."""


class GuardViolation(MimicMpcError):
    """The Frenet singularity guard 1 - kappa*d >= 0.5 was violated."""

    def __init__(self, sigma: float, d: float):
        self.sigma = float(sigma)
        self.d = float(d)
        super().__init__(
            f"singularity guard violated at sigma={self.sigma:.3f} m, d={self.d:.3f} m"
        )


class TrackSpecError(MimicMpcError):
    """A track specification is malformed or inconsistent."""


class SolverError(MimicMpcError):
    """The OCP solver failed to converge.

    Carries the last residuals so callers can report diagnostics.
    """

    def __init__(self, message: str, residuals=None, iterations: int = 0):
        self.residuals = residuals
        self.iterations = iterations
        super().__init__(message)


class RankDeficiencyError(MimicMpcError):
    """Active constraint Jacobian lost row rank (LICQ failure)."""


class NondifferentiableKktError(MimicMpcError):
    """Weak complementarity: the solution map is not differentiable here."""

    def __init__(self, margin: float):
        self.margin = float(margin)
        super().__init__(
            f"strict complementarity margin {self.margin:.3e} below threshold"
        )


class DataError(MimicMpcError):
    """Demonstration data is missing, empty, or inconsistent."""


class ExpertProfileError(MimicMpcError):
    """The synthetic expert left the lane; the profile is rejected."""


class ConfigError(MimicMpcError):
    """A run configuration file is invalid."""
