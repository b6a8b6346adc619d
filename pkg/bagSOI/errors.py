"""Error hierarchy shared by every stage of the pipeline.

Each class carries the exit code the command line reports for it.
"""


class BagSOIError(Exception):
    exit_code = 1


# input / geometry errors


class DegenerateVertices(BagSOIError, ValueError):
    exit_code = 2


class TooFewVertices(BagSOIError, ValueError):
    exit_code = 2


class EmptySet(BagSOIError, ValueError):
    exit_code = 2


class KTooLarge(BagSOIError, ValueError):
    exit_code = 2


class DegenerateCovariance(BagSOIError, ValueError):
    exit_code = 2


class DegenerateRim(BagSOIError, ValueError):
    exit_code = 2


class TooFewPoints(BagSOIError, ValueError):
    exit_code = 2


class SizeMismatch(BagSOIError, ValueError):
    exit_code = 2


class ParseError(BagSOIError, ValueError):
    exit_code = 1


class ValidationError(BagSOIError, ValueError):
    exit_code = 1


# run-time failures


class NotConverged(BagSOIError, RuntimeError):
    exit_code = 2


class NonFiniteCost(BagSOIError, RuntimeError):
    exit_code = 2


class NonFiniteLikelihood(BagSOIError, RuntimeError):
    exit_code = 2


class Infeasible(BagSOIError, RuntimeError):
    exit_code = 2


class SingularSystem(BagSOIError, RuntimeError):
    exit_code = 4


class NonConvergedEquilibrium(BagSOIError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, state=None, gradient: float = float("nan")):
        super().__init__(message)
        self.state = state
        self.gradient = gradient


class PlanningFailed(BagSOIError, RuntimeError):
    exit_code = 3

    def __init__(self, message: str, stage: str = "", iterations: int = 0):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage
        self.iterations = iterations


class TrackingFailed(BagSOIError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log
