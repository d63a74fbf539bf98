"""Exception hierarchy shared by every module."""


class PruneTuneError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(PruneTuneError, ValueError):
    """A precondition of a public operation was violated."""


class ShapeError(ContractError):
    """Operand shapes do not agree."""

    def __init__(self, message, node=None):
        self.node = node
        if node is not None:
            message = f"{message} (node {node!r})"
        super().__init__(message)


class NumericError(PruneTuneError, ArithmeticError):
    """Training or evaluation produced a non-finite value."""


class NumericOverflowError(NumericError):
    """A graph node produced NaN or Inf."""

    def __init__(self, node):
        self.node = node
        super().__init__(f"non-finite value produced by node {node!r}")


class OverlapError(PruneTuneError):
    """An element already owned (or frozen) was claimed by a domain."""

    def __init__(self, tensor, index, owner):
        self.tensor = tensor
        self.index = index
        self.owner = owner
        super().__init__(
            f"element {index} of tensor {tensor!r} is not free (owner: {owner})"
        )


class CapacityError(PruneTuneError):
    """Not enough free parameters remain for the requested budget."""


class DataError(PruneTuneError):
    """A corpus or vocabulary file could not be parsed."""


class FormatError(PruneTuneError):
    """A serialized file is malformed."""


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedError(FormatError):
    pass
