"""cmlab: a desk-scale laboratory for consistency-model training dynamics.

Trains consistency models on a synthetic disc dataset whose manifold geometry
is known exactly, trains self-supervised feature nets by transformation-
magnitude regression, exposes the resulting feature distance as a CM loss,
and decomposes CM update directions into manifold-parallel and orthogonal
parts.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, discs_preset, discs16_preset  # noqa: F401
from .errors import CmlabError  # noqa: F401
