"""Exception types raised across the package."""


class LpciError(Exception):
    """Base class for all package errors."""


class PanelError(LpciError, ValueError):
    """Invalid panel data."""


class SchemaError(PanelError):
    """A required column is missing from the input."""


class DuplicateError(PanelError):
    """A (group, time) cell occurs more than once."""


class UnbalancedError(PanelError):
    """A (group, time) cell is missing."""


class DegenerateScaleError(PanelError):
    """A column cannot be standardized because it is constant."""


class ConfigError(LpciError, ValueError):
    """Invalid configuration or parameters."""


class ModeError(ConfigError):
    """A method was requested in a mode it does not support."""


class StateError(LpciError, RuntimeError):
    """An operation is not valid for the current engine/residual state."""


class FetchError(LpciError, RuntimeError):
    """Remote data could not be fetched and no cache is available."""
