"""Channelized-reservoir history matching with diffusion priors and ML-enhanced localization."""
__version__ = "0.1.0"
