"""Exception types shared across the package."""


class MlcsegError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(MlcsegError):
    pass


class MissingParent(SchemaError):
    pass


class OutOfRangeParent(SchemaError):
    pass


class EmptyLevel(SchemaError):
    pass


class LabelError(MlcsegError):
    pass


class OutOfRangeLabel(LabelError):
    pass


class IncoherentLabels(LabelError):
    pass


class NoLabeledPoints(MlcsegError):
    pass


class MissingLabels(MlcsegError):
    pass


class EmptyCorrespondence(MlcsegError):
    pass


class NoDonorFound(MlcsegError):
    pass


class DegenerateDonor(MlcsegError):
    pass


class ShapeCountMismatch(MlcsegError):
    pass


class UnknownCategory(MlcsegError):
    pass


class InvalidSpec(MlcsegError):
    pass


class InvalidFraction(MlcsegError):
    pass


class EmptyLabeledPool(MlcsegError):
    pass


class FormatError(MlcsegError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class SchemaMismatch(MlcsegError):
    pass
