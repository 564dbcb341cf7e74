"""Exception hierarchy."""


class PrismError(Exception):
    pass


class ShapeMismatch(PrismError, ValueError):
    pass


class DegenerateScale(PrismError, ValueError):
    """A noise or coupling scale is non-positive or non-finite."""


class SymmetryViolation(PrismError, ValueError):
    """A spectrum that should come from real data has a large imaginary part."""


class TooLarge(PrismError, ValueError):
    pass


class TooSmall(PrismError, ValueError):
    pass


class BadSupport(PrismError, ValueError):
    pass


class EmptySampleSet(PrismError, ValueError):
    pass


class InsufficientSamples(PrismError, ValueError):
    pass


class BridgeTimeout(PrismError, TimeoutError):
    pass


class MalformedResponse(PrismError, ValueError):
    pass
