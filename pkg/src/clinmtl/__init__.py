"""Clinically guided multitask segmentation + risk grading, desk scale."""

__version__ = "0.1.0"
