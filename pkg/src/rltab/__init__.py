"""Constraint-guided, reward-shaped RL synthesis and auditing of tabular data."""

__version__ = "0.1.0"
