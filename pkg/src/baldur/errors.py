"""Exception hierarchy shared by every baldur module."""


class BaldurError(Exception):
    """Base class for all errors raised by the package."""


class InputError(BaldurError):
    """Malformed or inconsistent user input (CLI exit code 2)."""


class NumericalError(BaldurError):
    """Numerical failure during inference (CLI exit code 3)."""


class MissingFile(InputError, FileNotFoundError):
    pass


class ShapeMismatch(InputError):
    pass


class NonBinaryTarget(InputError):
    pass


class NonFiniteValue(InputError):
    pass


class KTooLarge(InputError):
    pass


class InsufficientClassMembers(InputError):
    pass


class ViewMissing(InputError):
    pass


class FeatureCountMismatch(InputError):
    pass


class ModelFormatError(InputError):
    pass


class DegenerateLabels(InputError):
    pass


class SingleClassInput(InputError):
    pass


class NumericalBreakdown(NumericalError):
    pass


class NegativeBeta(NumericalError):
    pass


class AllFactorsPruned(NumericalError):
    pass
