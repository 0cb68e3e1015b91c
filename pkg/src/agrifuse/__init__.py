"""Satellite-image and weather fusion for downy-mildew detection."""

__version__ = "0.1.0"
