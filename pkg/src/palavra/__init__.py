"""Personalized word embeddings for frozen dual encoders."""

__version__ = "0.1.0"
