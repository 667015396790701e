"""
Exception hierarchy for the bundlecodec app.
Every error raised on purpose by the library derives from BundleCodecError and
names the module it came from, so commands can report "<module>: <message>".
"""


class BundleCodecError(Exception):
    """Base class for all bundlecodec failures"""

    module = 'bundlecodec'

    def __init__(self, message: str, module: str = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def __str__(self):
        return f"{self.module}: {super().__str__()}"


class ShapeError(BundleCodecError, ValueError):
    """Tensor or array shapes do not fit an operation"""

    module = 'diffnum'


class NumericalError(BundleCodecError, FloatingPointError):
    """Non-finite values under numerics debugging, or a failed numerical check"""

    module = 'diffnum'


class FormatError(BundleCodecError):
    """A file does not follow the layout its reader expects"""

    module = 'dataio'


class TruncatedFileError(FormatError):
    """Payload shorter than the header declares"""

    def __init__(self, expected: int, actual: int, what: str = 'payload', module: str = None):
        super().__init__(
            f"truncated {what}: expected {expected} bytes, found {actual}", module=module
        )
        self.expected = expected
        self.actual = actual


class UnsupportedFormatError(FormatError):
    """Valid file of a variant this reader does not handle"""


class ConfigError(BundleCodecError):
    """Invalid configuration values or keys"""

    module = 'config'


class DataError(BundleCodecError):
    """Dataset contents violate a precondition"""

    module = 'dataio'


class TrainingDivergedError(BundleCodecError):
    """Loss became non-finite during training"""

    module = 'trainer'

    def __init__(self, iteration: int, last_finite_loss: float):
        super().__init__(
            f"loss is not finite at iteration {iteration} "
            f"(last finite loss {last_finite_loss!r})"
        )
        self.iteration = iteration
        self.last_finite_loss = last_finite_loss
