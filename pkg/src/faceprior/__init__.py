"""Toy-scale representation-conditioned one-step face restoration."""

__version__ = "0.1.0"
