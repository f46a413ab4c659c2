"""Desk-scale laboratory for the MINC non-contrastive objective."""

__version__ = "0.1.0"
