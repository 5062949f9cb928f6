"""Synthesis and certification of reduced-order polynomial output-feedback
controllers for control-affine systems."""

__version__ = "0.1.0"
