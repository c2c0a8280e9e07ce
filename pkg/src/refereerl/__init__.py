"""Referee-augmented PPO on a desk-scale crafting tech tree."""

__version__ = "0.1.0"
