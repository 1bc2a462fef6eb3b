"""Exception hierarchy shared across the package.

Split by how the CLI maps failures to exit codes: usage/contract problems
(exit 1) versus data/checkpoint problems (exit 2).
"""


class EosBridgeError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(EosBridgeError):
    """Tensor shapes incompatible with the requested operation."""


class GraphError(EosBridgeError):
    """Computation-graph misuse (non-scalar backward, reuse without reset)."""


class DegenerateRowError(EosBridgeError):
    """A softmax slice with every position forbidden."""


class DegenerateEmbeddingError(EosBridgeError):
    """A zero-norm vector where a direction is required."""


class LayoutError(EosBridgeError):
    """A sequence layout violating the structural rules of its mode."""


class MaskPolicyError(EosBridgeError):
    """A masking policy applied to an empty or ineligible span."""


class BatchConstructionError(EosBridgeError):
    """A contrastive batch that would contain duplicate pair ids."""


class StageOrderError(EosBridgeError):
    """A training stage initialized from a checkpoint of the wrong stage."""


class TrainingDivergedError(EosBridgeError):
    """A non-finite loss encountered during training."""


class DataError(EosBridgeError):
    """Malformed corpus or vocabulary data."""


class ParseError(DataError):
    """A corpus line that does not deserialize."""


class CheckpointError(EosBridgeError):
    """Corrupt, truncated, or mismatched checkpoint file."""
