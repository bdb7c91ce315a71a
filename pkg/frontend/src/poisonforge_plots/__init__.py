"""Render the poisonforge experiment CSVs into the standard figure set."""

__version__ = "0.1.0"
