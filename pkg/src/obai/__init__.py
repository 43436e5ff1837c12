"""Object-based active inference on the active-dSprites environment."""

__version__ = "0.1.0"
