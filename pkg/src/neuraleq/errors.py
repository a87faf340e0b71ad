"""Exception hierarchy shared by all neuraleq modules."""


class NeuralEqError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(NeuralEqError, ValueError):
    pass


class SampleRateMismatch(NeuralEqError, ValueError):
    pass


class TooShort(NeuralEqError, ValueError):
    pass


class WavFormatError(NeuralEqError, ValueError):
    """A WAV file is not 16-bit PCM mono at 16 kHz. The message names the field."""


class InvalidDuration(NeuralEqError, ValueError):
    pass


class ManifestError(NeuralEqError, ValueError):
    pass


class StaleCache(NeuralEqError, ValueError):
    pass


class EmptySplit(NeuralEqError, ValueError):
    pass


class NonFiniteLoss(NeuralEqError, ArithmeticError):
    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at batch {batch_index}")
        self.batch_index = batch_index


class NonFiniteObjective(NeuralEqError, ArithmeticError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite mask objective {value!r} at iteration {iteration}")
        self.iteration = iteration


class ModelFileError(NeuralEqError, ValueError):
    pass


class BadMagic(ModelFileError):
    pass


class VersionUnsupported(ModelFileError):
    pass


class CorruptPayload(ModelFileError):
    pass


class BlockTooLarge(NeuralEqError, ValueError):
    pass


class ArchitectureMismatch(NeuralEqError, ValueError):
    pass


class PathMismatch(NeuralEqError, ValueError):
    pass


class EmptyInput(NeuralEqError, ValueError):
    pass
