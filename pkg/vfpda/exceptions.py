"""Exception hierarchy for the assimilation library."""
from typing import Any, Dict, Optional


class AssimilationError(Exception):
    """Base class for every error raised by an analysis or forecast step."""

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable description used by the CLI and the HTTP layer."""
        record: Dict[str, Any] = {"error": type(self).__name__, "message": str(self)}
        for key, value in vars(self).items():
            if isinstance(value, (int, float, str)) or value is None:
                record[key] = value
        return record


class DimensionError(AssimilationError, ValueError):
    """Array shapes do not agree."""


class DegenerateEnsembleError(AssimilationError):
    """The ensemble has no spread where spread is required."""


class NumericalError(AssimilationError):
    """A linear-algebra step failed; carries diagnostics."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_record(self) -> Dict[str, Any]:
        record = super().to_record()
        record["diagnostics"] = dict(self.diagnostics)
        return record


class RankDeficiencyError(NumericalError):
    """The constraint Jacobian product is singular and the Newton system inconsistent."""


class ProjectionError(AssimilationError):
    """Newton projection onto the constraint manifold did not converge."""

    def __init__(
        self,
        message: str,
        residual: float,
        iterations: int,
        member: Optional[int] = None,
        scheme: Optional[str] = None,
    ):
        super().__init__(message)
        self.residual = float(residual)
        self.iterations = int(iterations)
        self.member = member
        self.scheme = scheme

    def for_member(self, member: int, scheme: Optional[str] = None) -> "ProjectionError":
        """Re-label the failure with the ensemble member (and flow scheme) it came from."""
        prefix = f"member {member}" if scheme is None else f"scheme {scheme}, member {member}"
        return ProjectionError(
            f"{prefix}: {self}",
            residual=self.residual,
            iterations=self.iterations,
            member=member,
            scheme=scheme or self.scheme,
        )


class FlowError(AssimilationError):
    """The particle flow produced a non-finite drift or state."""

    def __init__(self, message: str, member: Optional[int] = None):
        super().__init__(message)
        self.member = member


class ModelStepError(AssimilationError):
    """A forward model step failed (singular algebraic solve, Newton failure)."""


class ConfigError(ValueError):
    """An experiment description is invalid; the message names the offending key."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path

    def to_record(self) -> Dict[str, Any]:
        return {"error": "ConfigError", "message": str(self), "path": self.path}
