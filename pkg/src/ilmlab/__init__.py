"""Desk-scale lab for internal-LM estimation in attention encoder-decoders."""

__version__ = "0.1.0"
