"""Deployment rightsizer: fewer servers, same or better measured performance."""

__version__ = "0.1.0"
