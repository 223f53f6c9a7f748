"""
errors.py

Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes:
    • validation problems (config, checkpoint, env contract) → 1
    • CaseDrawError (gradcheck could not draw a usable case) → 1
    • NumericalAbort                                      → 2
"""


class TransMixError(Exception):
    """Root of every error raised on purpose by this package."""


class ShapeError(TransMixError, ValueError):
    """An op received inputs whose shapes break its shape rule."""


class TapeError(TransMixError, RuntimeError):
    """backward() misuse: non-scalar loss, or a tape replayed twice."""


class NumericalAbort(TransMixError, RuntimeError):
    """Training diverged: a loss or gradient stopped being finite."""


class ConfigError(TransMixError, ValueError):
    """Configuration file could not be parsed or validated."""


class CheckpointError(TransMixError, ValueError):
    """Checkpoint file is malformed or its config digest does not match."""


class EnvContractError(TransMixError, ValueError):
    """An environment received an unavailable action or a malformed episode."""


class CaseDrawError(TransMixError, RuntimeError):
    """No random draw of a gradient-check case was well conditioned."""
