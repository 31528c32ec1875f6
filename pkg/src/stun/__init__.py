"""Self-teaching uncertainty estimation for place recognition."""
__version__ = "0.1.0"
