"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data errors
exit 2, numerical failures exit 3.
"""


class UsatError(Exception):
    """Base class for all package errors."""


class UsageError(UsatError):
    """Bad command-line arguments or incoherent flag combinations."""


class DataError(UsatError):
    """Malformed files, manifests, containers, or out-of-contract inputs."""


class ContainerError(DataError):
    """Corrupt or mistyped binary container."""


class FingerprintMismatchError(DataError):
    """Adapter bundle or checkpoint does not match the loaded backbone."""


class NumericalError(UsatError):
    """Non-finite losses or divergence during optimization."""
