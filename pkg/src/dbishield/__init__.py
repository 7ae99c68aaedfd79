"""Desk-scale DBI engine, transparency shield and attack benchmark."""

__version__ = "0.1.0"
