"""Exploratory-action-conditioned graph dynamics for elastic cloth at desk scale."""

__version__ = "0.1.0"
