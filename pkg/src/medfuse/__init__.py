"""Multimodal image + report learning on numpy, with hand-written backprop."""

__version__ = "0.1.0"
