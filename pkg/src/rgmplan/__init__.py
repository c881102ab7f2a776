"""Learned sampling heuristics (recurrent generator + discriminators) for RRT* on grid maps."""

__version__ = "0.1.0"
