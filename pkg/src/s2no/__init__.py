"""Spectral and spatial neural operator pipeline for programmable bilayer sheets."""

__version__ = "0.1.0"
