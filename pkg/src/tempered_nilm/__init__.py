"""Transformer NILM with diagonal-masked attention and learned temperature."""

__version__ = "0.1.0"
