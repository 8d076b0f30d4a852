"""Exception types shared across the package."""


class QuadlinError(Exception):
    """Base class for all quadlin errors."""


class BundleError(QuadlinError):
    """A patient bundle could not be loaded."""


class MissingFile(BundleError):
    pass


class MalformedRecord(BundleError):
    """A bundle file contains an unparseable record (carries file and line)."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class IndexOutOfRange(BundleError):
    pass


class NegativeValue(BundleError):
    pass


class LengthMismatch(QuadlinError):
    pass


class InstanceTooLarge(QuadlinError):
    pass


class EmptyStructure(QuadlinError):
    pass


class Diverged(QuadlinError):
    """Objective became non-finite during optimization."""
