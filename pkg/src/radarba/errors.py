"""Exception taxonomy shared across the toolkit.

The CLI maps each class to a stable error category and exit code, so new
failure modes should reuse one of these rather than raising bare exceptions.
"""


class RadarbaError(Exception):
    """Base class for all toolkit errors."""

    category = "internal-error"


class InvalidArgumentError(RadarbaError, ValueError):
    """An argument violates a documented precondition (non-finite input,
    non-positive voxel size, non-PD covariance, ...)."""

    category = "invalid-argument"


class DataError(RadarbaError, RuntimeError):
    """Malformed or insufficient input data (schema violations, missing
    streams, non-monotone timestamps, empty clouds)."""

    category = "data-error"


class DataGapError(DataError):
    """A sensor stream has a coverage hole larger than tolerated."""


class SolverError(RadarbaError, RuntimeError):
    """Optimization could not proceed (factorization failure after retries,
    no correspondences)."""

    category = "solver-error"


class StructuralError(RadarbaError, RuntimeError):
    """A graph or problem is structurally unsolvable (disconnected pose
    graph, factor referencing a missing state)."""

    category = "structural-error"


class PipelineError(RadarbaError, RuntimeError):
    """Wraps a stage failure inside the end-to-end pipeline.

    Carries the stage name so callers can tell where the run died; the
    original exception is chained as __cause__.
    """

    category = "pipeline-error"

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
