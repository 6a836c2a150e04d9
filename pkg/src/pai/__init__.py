"""Parallel MCMC with GP subposterior surrogates, sharing and refinement."""

__version__ = "0.1.0"
