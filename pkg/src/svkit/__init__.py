"""svkit: Transformer-encoder speaker embeddings, x-vectors, PLDA and TESA scoring.

The package is built on a small reverse-mode autograd (:mod:`svkit.autograd`)
over numpy.  Most users need the estimators re-exported here or the
``svkit`` command line (:mod:`svkit.cli`).
"""

from .backend import LDA, PLDA, LengthNormalizer, PldaBackend, plda_llr
from .estimators import SvectorEmbedder, XvectorEmbedder
from .exceptions import SvkitError
from .metrics import compute_eer, compute_min_dcf, det_points
from .tesa import TesaVerifier

__version__ = "0.1.0"

__all__ = [
    "LDA",
    "PLDA",
    "LengthNormalizer",
    "PldaBackend",
    "SvectorEmbedder",
    "SvkitError",
    "TesaVerifier",
    "XvectorEmbedder",
    "compute_eer",
    "compute_min_dcf",
    "det_points",
    "plda_llr",
    "__version__",
]
