"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class ConfigError(ValueError):
    """Invalid or unknown configuration (plant id, term name, key...)."""


class ShapeError(ValueError):
    """Array shapes do not agree."""


class SplitError(ValueError):
    """A dataset cannot be split as requested."""


class DivergenceError(FloatingPointError):
    """A simulation or training run produced non-finite numbers.

    ``step`` holds the integration step, rollout step or epoch at which the
    problem was detected (``None`` if unknown).
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
