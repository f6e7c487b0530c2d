"""Spatio-temporal self-supervised traffic flow prediction at desk scale."""

__version__ = "0.1.0"
