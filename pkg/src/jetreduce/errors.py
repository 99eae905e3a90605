"""Exception types. Every error carries a stable string ``code``."""

from __future__ import annotations


class JetReduceError(Exception):
    code = "ERROR"
    exit_code = 1


class ParseError(JetReduceError):
    code = "PARSE_ERROR"
    exit_code = 2

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class UnboundCoordinate(JetReduceError):
    code = "UNBOUND_COORDINATE"
    exit_code = 2

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"coordinate {name!r} has no value")


class DomainError(JetReduceError):
    code = "DOMAIN_ERROR"
    exit_code = 4


class SamplingFailure(JetReduceError):
    code = "SAMPLING_FAILURE"
    exit_code = 5


class DegenerateSampling(JetReduceError):
    code = "DEGENERATE_SAMPLING"
    exit_code = 5


class OrderTooHigh(JetReduceError):
    code = "ORDER_TOO_HIGH"
    exit_code = 2


class NotScalar(JetReduceError):
    code = "NOT_SCALAR"
    exit_code = 2


class GeneratorMismatch(JetReduceError):
    code = "GENERATOR_MISMATCH"
    exit_code = 2

    def __init__(self, coordinate: str, detail: str = ""):
        self.coordinate = coordinate
        msg = f"flow derivative at a=0 disagrees with the characteristic field on {coordinate}"
        super().__init__(msg + (f": {detail}" if detail else ""))


class SingularJacobian(JetReduceError):
    code = "SINGULAR_JACOBIAN"
    exit_code = 5


class FlowEscaped(JetReduceError):
    code = "FLOW_ESCAPED"
    exit_code = 4

    def __init__(self, last_parameter: float, message: str = ""):
        self.last_parameter = last_parameter
        super().__init__(message or f"flow left the bounded region at parameter {last_parameter:.6g}")


class NoTransversalSet(JetReduceError):
    code = "NO_TRANSVERSAL_SET"
    exit_code = 5


class ParameterSolveFailed(JetReduceError):
    code = "PARAMETER_SOLVE_FAILED"
    exit_code = 5

    def __init__(self, message: str, point=None):
        self.point = point
        super().__init__(message)


class ChartIncomplete(JetReduceError):
    code = "CHART_INCOMPLETE"
    exit_code = 3


class TangencyFailure(JetReduceError):
    code = "TANGENCY_FAILURE"
    exit_code = 3


class ClosureFailure(JetReduceError):
    code = "CLOSURE_FAILURE"
    exit_code = 3


class NumericalBlowup(JetReduceError):
    code = "BLOWUP"
    exit_code = 4

    def __init__(self, t: float, message: str = ""):
        self.t = t
        super().__init__(message or f"reduced system blew up near t={t:.6g}")


class DomainExit(JetReduceError):
    code = "DOMAIN_EXIT"
    exit_code = 4

    def __init__(self, x: float, t: float, message: str = ""):
        self.x = x
        self.t = t
        super().__init__(message or f"left the chart domain at x={x:.6g}, t={t:.6g}")


class BreakingDetected(JetReduceError):
    code = "BREAKING_DETECTED"
    exit_code = 4

    def __init__(self, x: float, t: float, field=None):
        self.x = x
        self.t = t
        self.field = field
        super().__init__(f"implicit relation lost its solution branch at x={x:.6g}, t={t:.6g}")


class GridTooCoarse(JetReduceError):
    code = "GRID_TOO_COARSE"
    exit_code = 2


class InstabilityDetected(JetReduceError):
    code = "INSTABILITY_DETECTED"
    exit_code = 4

    def __init__(self, t: float):
        self.t = t
        super().__init__(f"reference solver went unstable near t={t:.6g}")


class ConfigError(JetReduceError):
    code = "CONFIG_ERROR"
    exit_code = 2


class ResidualCheckFailed(JetReduceError):
    code = "RESIDUAL_CHECK_FAILED"
    exit_code = 5
