"""Differentiable probabilistic Datalog for multi-hop relational reasoning."""

__version__ = "0.1.0"
