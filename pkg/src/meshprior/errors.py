"""Exception types shared across the package."""


class MeshPriorError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(MeshPriorError):
    """Input geometry is degenerate (coplanar/collinear points, zero-area hull)."""


class TopologyError(MeshPriorError):
    """Mesh connectivity violates a requirement (non-manifold, not watertight)."""


class CoverageError(MeshPriorError):
    """A partition or merge left some vertices or faces uncovered."""


class AtlasQualityError(MeshPriorError):
    """A UV atlas is too poor to carry supervision (too many dropped samples)."""


class UVValidationError(MeshPriorError):
    """An imported UV atlas violates atlas invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class OptimizationError(MeshPriorError):
    """An optimization diverged (non-finite loss)."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class StageError(MeshPriorError):
    """A pipeline stage failed; carries the stage name and last checkpoint."""

    def __init__(self, stage, cause, checkpoint=None):
        self.stage = stage
        self.checkpoint = checkpoint
        msg = f"stage '{stage}' failed: {cause}"
        if checkpoint is not None:
            msg += f" (last checkpoint: {checkpoint})"
        super().__init__(msg)
