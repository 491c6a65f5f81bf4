"""Exception types shared across the package."""


class DataError(Exception):
    """A cohort, volume file, or manifest violates the expected structure."""


class DivergenceError(Exception):
    """Training produced a non-finite loss."""


class NonFiniteError(FloatingPointError):
    """A forward computation produced NaN or Inf while NaN-debug mode is on."""


class NotFittedError(ValueError, AttributeError):
    """Estimator used before fit(); mirrors the scikit-learn exception."""
