"""EV battery capacity estimation via similarity-weighted masked pretraining."""

__version__ = "0.1.0"
