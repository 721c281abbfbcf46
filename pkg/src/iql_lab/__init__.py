"""Implicit Q-learning on tabular MDPs: oracles, learners and a CLI."""

__version__ = "0.1.0"
