"""Spatial conditional extremes modelling and simulation of gridded hourly precipitation.

Submodules are imported lazily so that the CLI can cap BLAS threads before numpy loads.
"""

__version__ = "0.1.0"

__all__ = [
    "cli",
    "condext",
    "config",
    "datastore",
    "diagnostics",
    "evaluate",
    "margins",
    "occurrence",
    "randfield",
    "serialize",
    "simulate",
    "standardize",
    "svgplot",
    "synthetic",
]
