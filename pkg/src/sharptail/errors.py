"""Exception hierarchy."""


class SharptailError(Exception):
    """Base class for all package errors."""


class DimensionError(SharptailError, ValueError):
    """Mismatched grids, widths or shapes."""


class ConfigError(SharptailError, ValueError):
    """Invalid configuration."""


class SingularInstantonError(SharptailError):
    """The projection direction has zero norm."""


class DivergenceError(SharptailError, FloatingPointError):
    """A time integration produced non-finite values.

    Attributes
    ----------
    node : int
        First grid node at which a non-finite value appeared.
    """

    def __init__(self, node, what="state"):
        self.node = int(node)
        self.what = what
        super().__init__(f"non-finite {what} at time node {self.node}")


class CheckpointPlanError(SharptailError, ValueError):
    """A checkpoint budget too small to replay the grid."""


class NonConvergenceError(SharptailError):
    """Iteration limit exhausted; carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class AssumptionViolation(SharptailError):
    """A structural assumption of the Laplace expansion fails.

    Raised for eigenvalues mu >= 1, nonpositive determinants or brackets,
    singular U_z, and indefinite projected Hessians.
    """


class RiccatiSingularityError(SharptailError):
    """Blow-up of the Riccati solution."""

    def __init__(self, node, norm):
        self.node = int(node)
        self.norm = float(norm)
        super().__init__(f"Riccati solution blew up at node {self.node} (|Q|={self.norm:.3e})")
