"""Multi-agent reinforcement-learning frame sampling over frame-feature sequences."""

__version__ = "0.1.0"
