"""Low-rank PPO fine-tuning across a dynamics gap, with a recovery safety gate."""

__version__ = "0.1.0"
