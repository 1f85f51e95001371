"""Exception types raised across the package."""


class MfffError(Exception):
    """Base class for all package errors."""


class DegenerateInput(MfffError, ValueError):
    """Input lies outside the projectable set of a manifold."""


class SingularPolar(MfffError, ArithmeticError):
    """The polar factor derivative of an SO(3) projection is undefined."""


class OffManifold(MfffError, ValueError):
    """A point expected on the manifold is further than the tolerance."""


class OutOfSupport(MfffError, ValueError):
    """A point lies outside the support of a distribution."""


class NonDifferentiable(MfffError, ValueError):
    """A density is not differentiable at the requested point."""


class DimensionMismatch(MfffError, ValueError):
    pass


class SingularJacobian(MfffError, ArithmeticError):
    """Tangent Jacobian determinant fell below the invertibility tolerance."""


class ZeroTangent(MfffError, ArithmeticError):
    pass


class NonFiniteGradient(MfffError, FloatingPointError):
    pass


class NonFiniteLoss(MfffError, FloatingPointError):
    pass


class SizeMismatch(MfffError, ValueError):
    pass


class ParseError(MfffError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class OffManifoldRow(MfffError, ValueError):
    def __init__(self, index, distance):
        self.index = index
        self.distance = distance
        super().__init__(f"row {index} is {distance:.3g} away from the manifold")


class ConfigError(MfffError, ValueError):
    """Configuration validation failed; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))
