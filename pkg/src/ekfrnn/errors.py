"""Exception hierarchy shared by all ekfrnn modules."""


class EkfRnnError(Exception):
    """Base class for every error raised by the package."""


class DimensionMismatch(EkfRnnError, ValueError):
    pass


class NotPositiveDefinite(EkfRnnError, ArithmeticError):
    pass


class NonFiniteEvaluation(EkfRnnError, ArithmeticError):
    pass


class NonFiniteState(EkfRnnError, ArithmeticError):
    pass


class HessianNotPD(NotPositiveDefinite):
    """Loss Hessian with respect to the prediction is not positive definite."""


class ZeroCurvature(EkfRnnError, ArithmeticError):
    """Second derivative of a separable regularizer is not strictly positive."""


class ZeroRegularization(EkfRnnError, ValueError):
    """Prior covariance requested from zero l2 weights without an explicit P0."""


class ConstantReference(EkfRnnError, ValueError):
    """BFR is undefined for a constant measured signal."""


class ParseError(EkfRnnError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class TrainingDiverged(EkfRnnError, ArithmeticError):
    """Raised when an estimate leaves the divergence guard during training."""

    def __init__(self, message, epoch=None, sample=None, experiment=None):
        self.epoch = epoch
        self.sample = sample
        self.experiment = experiment
        super().__init__(
            f"{message} (epoch={epoch}, experiment={experiment}, sample={sample})"
        )


class ConfigError(EkfRnnError, ValueError):
    pass
