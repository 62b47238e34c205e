"""Exact, variational and unrolled-network score functions for Ising and
sparse-coding models, with a DDPM exponential-integrator sampler."""

__version__ = "0.1.0"
