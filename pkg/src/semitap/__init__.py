"""Semi-supervised temporal action proposal learning on synthetic benchmarks.

Boundary-sensitive proposal model (temporal conv TEM + confidence PEM)
trained from scratch under a student/teacher weight-averaging scheme with
time warping and time masking perturbations, plus standard proposal and
detection metrics.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DivergenceError, SemitapError, ValidationError

__all__ = [
    "__version__",
    "ConfigError",
    "DivergenceError",
    "SemitapError",
    "ValidationError",
]
