"""Chain-of-frame refinement sandbox over a synthetic scene domain."""

__version__ = "0.1.0"
