"""Multi-scale medication adherence prediction from MEMS events and surveys."""

__version__ = "0.1.0"
