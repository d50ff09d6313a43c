"""Space and space-time reduced-order models for parametrized advection-diffusion
problems, with Monte Carlo and stochastic Galerkin uncertainty propagation."""

__version__ = "0.1.0"
