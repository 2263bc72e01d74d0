"""Streaming recommendation with dynamically expandable graph convolutions."""

__version__ = "0.1.0"
