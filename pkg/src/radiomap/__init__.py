"""Radio-map prediction from aerial imagery and differentiable coverage optimisation."""

__version__ = "0.1.0"
