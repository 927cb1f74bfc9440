"""Embodied-efficiency metrics, a planar-arm simulator, and compression tooling."""

__version__ = "0.1.0"
