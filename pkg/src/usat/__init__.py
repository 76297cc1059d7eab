"""Universal speaker-adaptive speech synthesis at desk scale.

Two adaptation routes share one backbone: instant voice transfer from a
speaker embedding computed on seconds of reference audio, and fine-grained
adaptation that freezes the backbone and tunes small inserted adapters plus
an adaptive speaker embedding. The package also ships the corpus
preprocessing pipeline, an evaluation harness, and a command-line driver.
"""

from .config import Config, load_config
from .errors import (
    ContainerError,
    DataError,
    FingerprintMismatchError,
    NumericalError,
    UsageError,
    UsatError,
)

__version__ = "0.1.0"

__all__ = [
    "Config",
    "load_config",
    "UsatError",
    "UsageError",
    "DataError",
    "ContainerError",
    "FingerprintMismatchError",
    "NumericalError",
    "__version__",
]
