"""Cost-constrained imitation learning on toy constrained MDPs."""

__version__ = "0.1.0"
