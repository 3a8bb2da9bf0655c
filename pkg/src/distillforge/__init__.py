"""Desk-scale toolkit for distilling masked-language-model encoders."""

__version__ = "0.1.0"
