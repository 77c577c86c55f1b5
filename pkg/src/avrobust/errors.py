"""Exception types shared across the package.

The CLI maps these to distinct exit codes, so stages can be scripted:
config problems (2), missing upstream artifacts (3), numeric divergence (4).
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DependencyError(RuntimeError):
    """A required input artifact (manifest, bank, checkpoint) is missing."""


class DataFormatError(RuntimeError):
    """A persisted artifact exists but cannot be decoded."""


class GenerationError(RuntimeError):
    """Synthetic data generation cannot satisfy its preconditions."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
