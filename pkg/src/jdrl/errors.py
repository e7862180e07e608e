class JDRLError(Exception):
    pass


class ConfigurationError(JDRLError, ValueError):
    pass


class InvalidSeedError(JDRLError, ValueError):
    pass


class NumericError(JDRLError, FloatingPointError):
    pass


class ShapeError(JDRLError, ValueError):
    pass


class FlowEstimationError(JDRLError, RuntimeError):
    def __init__(self, estimator: str, message: str):
        super().__init__(f"flow estimator {estimator!r} failed: {message}")
        self.estimator = estimator


class DatasetError(JDRLError, OSError):
    pass


class ResumeMismatchError(JDRLError, RuntimeError):
    pass
