"""Desk-scale flexible multimodal person retrieval benchmark."""

__version__ = "0.1.0"
