"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (model, policy, experiment)."""


class InputError(ValueError):
    """Malformed or out-of-range input to an operation."""


class StateError(RuntimeError):
    """Operation called on an object in the wrong state."""


class InfeasibleError(RuntimeError):
    """No candidate satisfies the requested constraint."""
