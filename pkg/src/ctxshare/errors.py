"""Exception types shared across the package."""


class CtxShareError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(CtxShareError):
    """Operands have incompatible shapes for the requested operation."""


class RowFullyMasked(CtxShareError):
    """A softmax row contains only -inf logits and has no valid distribution."""


class DegenerateHistogram(CtxShareError):
    """All histogram mass sits in a single point; no threshold separates it."""


class InvalidConfig(CtxShareError):
    """A configuration violates its invariants or cannot be parsed."""


class BadImageShape(CtxShareError):
    """An image cannot be tiled into the token grid."""
