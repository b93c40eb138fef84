"""Exception hierarchy shared by every module of the package."""


class BatchOrthoError(Exception):
    """Base class for all errors raised by batchortho."""


class FactorizationError(BatchOrthoError, ArithmeticError):
    """A dense factorization could not be computed."""


class NotPositiveDefiniteError(FactorizationError):
    """A non-positive pivot was met during a Cholesky/LDL factorization.

    ``index`` is the zero-based position of the failing pivot.
    """

    def __init__(self, index, value, context=""):
        self.index = index
        self.value = value
        msg = f"matrix is not positive definite: pivot {index} = {value:.3e}"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class DegenerateBatchError(BatchOrthoError, ValueError):
    """Batch too small to estimate a covariance."""


class DegenerateSpectrumError(BatchOrthoError, ValueError):
    """Spectrum with zero total mass (effective rank undefined)."""


class SpecError(BatchOrthoError, ValueError):
    """Invalid or unparseable whitening layer description."""


class PhaseError(BatchOrthoError, RuntimeError):
    """Backward called on a cache that cannot be differentiated."""


class UninitializedStatisticsError(BatchOrthoError, RuntimeError):
    """Evaluation requested before any running covariance was recorded."""


class ParameterCorruptionError(BatchOrthoError, ValueError):
    """A parameter lost a structural property (e.g. skew-symmetry)."""


class OracleError(BatchOrthoError, ArithmeticError):
    """The finite-difference oracle evaluated a non-finite value."""

    def __init__(self, coordinate, value):
        self.coordinate = coordinate
        super().__init__(f"non-finite objective ({value}) at coordinate {coordinate}")


class IdxFormatError(BatchOrthoError, ValueError):
    """Malformed IDX file."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class TrainingDivergedError(BatchOrthoError, FloatingPointError):
    """Non-finite loss during training; ``layer`` names the first offender."""

    def __init__(self, layer, step, epoch):
        self.layer = layer
        self.step = step
        self.epoch = epoch
        super().__init__(
            f"non-finite values first produced by layer '{layer}' "
            f"(epoch {epoch}, step {step})"
        )
