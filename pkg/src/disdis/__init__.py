"""Discrete-latent stochastic trajectory prediction with distribution
discrimination, exhaustive-enumeration PCMD evaluation, and a minimal
reverse-mode autodiff core. Pure numpy, CPU, deterministic by seed."""

__version__ = "0.1.0"
