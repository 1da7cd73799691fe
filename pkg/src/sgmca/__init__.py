"""Semi-blind source separation with learned spectral constraints (sGMCA)."""

from sgmca.matops import NumericalError

__version__ = "0.1.0"

__all__ = ["NumericalError", "__version__"]
