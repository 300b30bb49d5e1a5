"""Room-expert guided image-goal navigation on synthetic gridworld houses."""

__version__ = "0.1.0"
