"""Exception types raised across the package."""


class GecolabError(Exception):
    """Base class for package errors."""


class EmptyDatasetError(GecolabError, ValueError):
    def __init__(self, msg="empty dataset"):
        super().__init__(msg)


class DivergedError(GecolabError, FloatingPointError):
    """Non-finite values appeared in an iterate or a loss term."""


class DeadCellError(GecolabError, ValueError):
    """A basis cell received zero posterior mass."""

    def __init__(self, cells):
        self.cells = list(cells)
        super().__init__(f"dead basis cell: {self.cells[:10]}")


class DomainError(GecolabError, ValueError):
    pass


class StiffConstraintError(GecolabError, ValueError):
    def __init__(self, omega, beta, rcond):
        self.omega, self.beta, self.rcond = omega, beta, rcond
        super().__init__(
            f"constraint too stiff: omega={omega!r}, beta={beta!r} (reciprocal condition {rcond:.3e})"
        )


class ConvergenceError(GecolabError, RuntimeError):
    def __init__(self, msg, residual):
        self.residual = residual
        super().__init__(f"{msg} (final residual {residual:.3e})")
