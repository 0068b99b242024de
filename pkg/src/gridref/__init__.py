"""Speaker-listener referring expression game on a procedural grid world."""

__version__ = "0.1.0"
