"""Desk-scale toolkit for frequency-split, MoE-routed unrolled MRI reconstruction."""

__version__ = "0.1.0"
