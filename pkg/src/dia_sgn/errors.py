"""Exception types shared across the package."""


class DiaSgnError(Exception):
    """Base class for all package-specific errors."""


# ---- geometry ----

class DegeneratePath(DiaSgnError):
    """Fewer than two distinct waypoints."""


class OffCorridor(DiaSgnError):
    """Point is farther from the path than the corridor half-width."""


class OutOfRange(DiaSgnError):
    """Arc-length coordinate outside [0, path length]."""


class NoRelation(DiaSgnError):
    """Two paths never come near each other."""


class InvalidReferencePoint(DiaSgnError):
    """Reference point violates kind/partner/light constraints or lies off the path."""


# ---- dynamic environment ----

class NoEgoPath(DiaSgnError):
    """The predicted agent is not placed on a known reference path."""


class NoReferenceDia(DiaSgnError):
    """No insertion area directly in front of the predicted agent."""


class NonMonotonicTime(DiaSgnError):
    """Snapshot timestamps are not strictly increasing."""


# ---- network ----

class DimensionMismatch(DiaSgnError):
    """Tensor shapes inconsistent with the parameter set."""


class EmptyNeighborhood(DiaSgnError):
    """Attention requested over an empty candidate set."""


class NonFinite(DiaSgnError):
    """NaN or Inf encountered where a finite value is required."""


class InvalidDistribution(DiaSgnError):
    """Mixture parameters violate simplex/positive-definiteness constraints."""


class InvalidLabel(DiaSgnError):
    """Ground-truth insertion weights are not one-hot."""


# ---- training ----

class NonFiniteGradient(DiaSgnError):
    """A gradient tensor contains NaN or Inf."""


class Diverged(DiaSgnError):
    """Training loss became non-finite.

    Carries the last parameter set that produced a finite loss.
    """

    def __init__(self, message, params=None, metrics=None):
        super().__init__(message)
        self.params = params
        self.metrics = metrics


class EmptyDataset(DiaSgnError):
    """Evaluation or training requested on an empty dataset."""


# ---- simulation / IO ----

class NoInsertion(DiaSgnError):
    """Episode ended without the predicted agent inserting anywhere."""


class SpawnFailure(DiaSgnError):
    """Agents could not be placed without overlap."""


class InvalidParams(DiaSgnError):
    """Template or configuration parameters outside their documented range."""


class FormatError(DiaSgnError):
    """Malformed dataset file; message names the file/line/column."""


class FrameOutOfRange(DiaSgnError):
    """Requested frame index outside the episode."""
