"""Exception hierarchy shared across the package."""


class SparseSegError(Exception):
    """Base class for all errors raised by sparseseg."""


class InvalidInputError(SparseSegError, ValueError):
    pass


class MalformedScanError(SparseSegError, ValueError):
    pass


class MalformedLabelError(SparseSegError, ValueError):
    pass


class UnknownClassError(SparseSegError, KeyError):
    def __init__(self, class_id):
        self.class_id = class_id
        super().__init__(f"raw class id {class_id} is not in the remap table")

    def __str__(self):
        return self.args[0]


class InvalidSpecError(SparseSegError, ValueError):
    pass


class InvalidTensorError(SparseSegError, ValueError):
    pass


class InconsistentMapError(SparseSegError, ValueError):
    pass


class MissingLabelsError(SparseSegError, ValueError):
    pass


class InvalidSectorError(SparseSegError, ValueError):
    pass


class UndefinedMetricError(SparseSegError, ArithmeticError):
    pass


class DivergenceError(SparseSegError, FloatingPointError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class IncompatibleCheckpointError(SparseSegError, ValueError):
    pass


class EquivalenceError(SparseSegError, AssertionError):
    """Dataflows disagree beyond the allowed tolerance."""

    def __init__(self, dataflow, max_deviation, tolerance):
        self.dataflow = dataflow
        self.max_deviation = max_deviation
        self.tolerance = tolerance
        super().__init__(
            f"dataflow {dataflow!r} deviates from reference by {max_deviation:.3e} "
            f"(tolerance {tolerance:.1e})"
        )


class VariantError(SparseSegError, RuntimeError):
    def __init__(self, index, transform, cause):
        self.index = index
        self.transform = transform
        super().__init__(f"model failed on TTA variant {index} ({transform}): {cause}")
