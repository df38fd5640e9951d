"""Exception types shared across the package.

Each class marks a distinct failure category so callers (and the CLI exit-code
mapping) can react without string-matching messages.
"""


class SplitIspError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(SplitIspError):
    """A config value, override, or argument is invalid or unknown."""


class ShapeError(SplitIspError):
    """An array/tensor has the wrong shape, dtype family, or divisibility."""


class ValidationError(SplitIspError):
    """Data content violates a contract (range, schema, disjointness...)."""


class OrderingError(SplitIspError):
    """Step indices passed in a non-monotone or out-of-order fashion."""


class NumericError(SplitIspError):
    """A numeric invariant broke (NaN/Inf loss, degenerate coefficient).

    ``context`` carries whatever diagnostic values were at hand (timestep,
    loss components, iteration); ``last_checkpoint`` is set when a training
    run aborts and the most recent good checkpoint is known.
    """

    def __init__(self, message, context=None, last_checkpoint=None):
        super().__init__(message)
        self.context = dict(context or {})
        self.last_checkpoint = last_checkpoint


class CheckpointError(SplitIspError):
    """A checkpoint is missing, malformed, or incompatible with the config."""
