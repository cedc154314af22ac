"""Exception types shared across the package."""


class NotPositiveSemidefiniteError(ValueError):
    """A matrix failed Cholesky factorization even after the jitter ladder."""

    def __init__(self, pivot: int, jitter_tried: float):
        self.pivot = pivot
        self.jitter_tried = jitter_tried
        super().__init__(
            f"matrix is not positive semidefinite: factorization failed at pivot "
            f"{pivot} (max diagonal jitter tried: {jitter_tried:g})"
        )


class ConditioningDegenerateError(ValueError):
    """The block being conditioned on has a singular covariance."""


class NumericalDegeneracyError(RuntimeError):
    """A Monte Carlo weight became nonfinite (conditional sd underflow)."""

    def __init__(self, sample: int, index: int):
        self.sample = sample
        self.index = index
        super().__init__(
            f"nonfinite importance weight at sample {sample}, coordinate {index}"
        )


class DesignMismatchError(ValueError):
    """Parameters fitted on one grid design were applied to another."""


class DataFormatError(ValueError):
    """An input file failed to parse; the message names the line."""


class OptimizationFailureError(RuntimeError):
    """Every optimization start failed; carries per-start diagnostics."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "; ".join(str(d) for d in self.diagnostics)
        super().__init__(f"all optimization starts failed: {lines}")
