"""Counterfactually fair prediction via inferred confounders."""
from . import numerics  # noqa: F401  (sets float64 as the default dtype)

__version__ = "0.1.0"
