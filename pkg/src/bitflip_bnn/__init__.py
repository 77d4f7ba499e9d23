"""Bit-flip robustness toolkit for quantized and binary networks."""
__version__ = "0.1.0"
