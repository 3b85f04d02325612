"""Exception hierarchy shared by every stage of the pipeline."""


class SpeechMotionError(Exception):
    """Base class; the CLI maps any subclass to exit code 2."""


class BadConfig(SpeechMotionError, ValueError):
    pass


class InputTooShort(SpeechMotionError, ValueError):
    pass


class DegenerateNormalization(SpeechMotionError, ValueError):
    pass


class MissingMetadata(SpeechMotionError, ValueError):
    pass


class InvalidSeverity(SpeechMotionError, ValueError):
    pass


class IoError(SpeechMotionError, OSError):
    def __init__(self, msg, path=None):
        super().__init__(f"{msg}: {path}" if path is not None else msg)
        self.path = path


class ShapeError(SpeechMotionError, ValueError):
    pass


class BadLoss(SpeechMotionError, ValueError):
    pass


class NonFiniteGradient(SpeechMotionError, FloatingPointError):
    pass


class LabelLeakError(SpeechMotionError):
    """A patient recording reached a training set that must be healthy-only."""


class BadCheckpoint(SpeechMotionError, ValueError):
    pass


class DegenerateVariance(SpeechMotionError, ValueError):
    pass


class DegenerateReference(SpeechMotionError, ValueError):
    pass


class TooFewSamples(SpeechMotionError, ValueError):
    pass


class ConvergenceError(SpeechMotionError, RuntimeError):
    def __init__(self, msg, violation=None):
        super().__init__(msg)
        self.violation = violation


class SingleClassError(SpeechMotionError, ValueError):
    pass


class BadManifest(SpeechMotionError, ValueError):
    pass


class RoundFailed(SpeechMotionError, RuntimeError):
    def __init__(self, round_index, cause):
        super().__init__(f"round {round_index} failed: {type(cause).__name__}: {cause}")
        self.round_index = round_index
        self.cause = cause
