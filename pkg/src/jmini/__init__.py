"""Desk-scale unified multimodal understanding and generation model."""

__version__ = "0.1.0"
