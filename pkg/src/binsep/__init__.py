"""Binaural source separation with comb-filter IPD and interaural-coherence models."""

__version__ = "0.1.0"
