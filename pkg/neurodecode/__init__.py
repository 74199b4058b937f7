"""Desk-scale two-stage fMRI visual decoding pipeline."""

__version__ = "0.1.0"
