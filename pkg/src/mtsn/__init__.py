"""Teacher-student speech-intent classification at desk scale.

A self-contained numpy stack: a reverse-mode autodiff tensor engine,
GRU/linear layers with numba-accelerated recurrence kernels (pure-numpy
fallback via the MTSN_NUMBA environment variable), distillation and
cross-entropy losses, Adam, a synthetic bilingual corpus generator, and
an experiment harness with a command-line front end.
"""

__version__ = "0.1.0"

from .errors import MtsnError  # noqa: F401
