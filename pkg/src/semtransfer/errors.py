"""Exception types shared across the package.

The CLI maps these onto its exit-code convention: usage errors exit 2,
input/archive errors exit 3, numerical failures exit 4.
"""


class UsageError(Exception):
    """Invalid flag/argument combination supplied by the caller."""


class InputError(Exception):
    """Unreadable, malformed or inconsistent input data (files, archives)."""


class NumericalError(Exception):
    """Non-finite losses, diverging optimization or similar numeric failure."""
