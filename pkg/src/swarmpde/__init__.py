"""Swarm control of PDEs with shared operator policies trained end-to-end
through differentiable solvers."""

__version__ = "0.1.0"
