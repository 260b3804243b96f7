"""Relation representations learned by matching the blanks, at desk scale."""

__version__ = "0.1.0"
