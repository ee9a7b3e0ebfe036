"""Object-as-a-service platform: immutable objects over stateless functions."""

from .config import PlatformConfig
from .runtime import Platform

__version__ = "0.1.0"

__all__ = ["Platform", "PlatformConfig", "__version__"]
