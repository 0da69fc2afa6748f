"""Exception types shared across the toolkit."""


class DistillkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(DistillkitError, ValueError):
    """An op received tensors whose shapes do not conform."""

    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(shapes)
        msg = f"{op}: incompatible shapes {list(self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(DistillkitError, ValueError):
    """Misuse of the computation graph (e.g. non-scalar loss in grad)."""


class GradCheckError(DistillkitError, RuntimeError):
    """Finite-difference check hit a non-finite evaluation."""


class ConfigError(DistillkitError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(DistillkitError, ValueError):
    """Dataset construction or sampling violated a precondition."""


class FileFormatError(DistillkitError, ValueError):
    """A binary artifact file is corrupt or does not match expectations."""


class TrajectoryStoreError(DistillkitError, RuntimeError):
    """Teacher trajectory store content conflicts with the requested config."""


class DegenerateSegmentError(DistillkitError, ValueError):
    """Teacher segment has zero length; matching loss is undefined."""


class IterationAbort(DistillkitError, RuntimeError):
    """One distillation iteration produced non-finite values and was skipped."""

    def __init__(self, step, value, what="loss"):
        self.step = step
        self.value = value
        super().__init__(f"non-finite {what} at student step {step}: {value}")


class DistillRunError(DistillkitError, RuntimeError):
    """Too many aborted iterations; the distillation run failed."""
