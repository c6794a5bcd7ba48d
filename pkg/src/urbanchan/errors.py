"""Exception hierarchy.

``InputError`` covers anything the caller can fix by changing the input
(the CLI maps it to exit code 2). ``EstimationError`` is a runtime failure
of an otherwise valid computation (exit code 1).
"""


class InputError(ValueError):
    """Invalid, inconsistent or degenerate input."""


class DegenerateFitError(InputError):
    """Regression input cannot identify the model (e.g. one distinct abscissa)."""


class InsufficientAnchorsError(InputError):
    """Fewer usable anchor points than a frequency model needs."""


class EstimationError(RuntimeError):
    """A numerically valid input on which the estimator could not produce a result."""
