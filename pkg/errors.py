"""
Exception hierarchy for the AVSE toolkit.

Each exception carries the exit code the CLI reports for it:
2 for configuration problems, 3 for pipeline-state problems,
4 for storage/I-O problems and 1 for everything else.
"""


class AvseError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


# --- Configuration family (exit 2) ---

class ConfigError(AvseError):
    """Invalid configuration, flag combination or input descriptor."""

    exit_code = 2


class DurationOutOfRange(ConfigError):
    """Requested utterance duration lies outside the allowed window."""


class VariantConstraintError(ConfigError):
    """A dataset or model variant constraint was violated."""


class LabelError(ConfigError):
    """Class label outside [0, C)."""


# --- State family (exit 3) ---

class StateError(AvseError):
    """An operation was requested in the wrong pipeline state."""

    exit_code = 3


class CheckpointError(StateError):
    """Checkpoint missing, unreadable or incompatible with the model."""


# --- Storage (exit 4) ---

class StorageError(AvseError):
    """Malformed or unreadable artifact file."""

    exit_code = 4


# --- Numerical / shape errors (exit 1) ---

class ShapeError(AvseError):
    """Tensor or sequence shapes do not agree."""


class InputTooShort(ShapeError):
    """Waveform shorter than the audio encoder kernel."""


class ZeroEnergyError(AvseError):
    """A signal with zero energy was given where energy is required."""


class AlreadyCropped(AvseError):
    """Mouth crop requested on a video that is already a mouth crop."""


class DegenerateVariance(AvseError):
    """Projection requested on data without variance."""


class SingleClusterError(AvseError):
    """Silhouette requested with fewer than two labels."""


class PesqUnavailable(AvseError):
    """The external PESQ evaluator failed or could not be run."""


class OrderingViolation(AvseError):
    """Seed-median results across variants do not show the expected ordering."""


class DecouplingViolation(AvseError, AssertionError):
    """A training batch breaks the cue-decoupling contract of its strategy."""


def exit_code_for(exc: BaseException) -> int:
    """Maps an exception to the CLI exit code contract."""
    if isinstance(exc, AvseError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 4
    return 1
