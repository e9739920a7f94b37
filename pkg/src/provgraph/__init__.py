"""Inference provenance graphs for adversarial example detection."""

__version__ = "0.1.0"
