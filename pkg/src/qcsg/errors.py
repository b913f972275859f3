"""Exception types shared across the package.

The CLI maps ``ValidationError`` to exit code 1 and ``NumericalError`` to
exit code 2.
"""


class QcsgError(Exception):
    pass


class ValidationError(QcsgError, ValueError):
    """Bad input: shapes, datasets, cameras, configuration."""


class NumericalError(QcsgError, ArithmeticError):
    """Non-finite values or a degenerate numerical state."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node: {node})")
        self.node = node
