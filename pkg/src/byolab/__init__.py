"""Desk-scale BYOL-A pretraining, linear probing and representational similarity analysis."""

__version__ = "0.1.0"
