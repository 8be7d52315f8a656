"""Dual-granularity triplet loss toolkit for two-modality metric learning."""
__version__ = "0.1.0"
