"""Facial albedo estimation from several in-the-wild style images, on synthetic data."""

__version__ = "0.1.0"
