"""Spring-mass hopping toolkit: reduced-order model identification, trajectory
optimization, and CLF-QP control of a planar compliant biped."""

__version__ = "0.1.0"
