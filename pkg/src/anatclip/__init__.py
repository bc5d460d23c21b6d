"""Desk-scale contrastive vision-language training and zero-shot anatomy classification."""

__version__ = "0.1.0"
