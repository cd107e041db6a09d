"""Ball catching with domain-randomized instance sets."""

__version__ = "0.1.0"
