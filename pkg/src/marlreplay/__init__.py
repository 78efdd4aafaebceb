"""Independent Q-learning with stabilised experience replay."""

__version__ = "0.1.0"
