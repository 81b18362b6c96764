"""Exception and warning types shared across the package."""


class DomainError(ValueError):
    """A parameter or observation lies outside the admissible domain."""


class ParseError(ValueError):
    """A model, q-function or data specification could not be parsed."""


class QuadratureWarning(RuntimeWarning):
    """Adaptive quadrature stopped before reaching the requested tolerance."""
