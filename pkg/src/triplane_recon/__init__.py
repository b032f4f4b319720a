"""Triplane SDF and texture fields with differentiable mesh extraction, rendering and evaluation."""

__version__ = "0.1.0"
