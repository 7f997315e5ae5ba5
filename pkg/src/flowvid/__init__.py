"""Desk-scale randomized conditional flow matching for video prediction."""

__version__ = "0.1.0"
