"""Learn habitual GPS routes on a fixed lat/lon grid and flag unlikely ones."""

__version__ = "0.1.0"
