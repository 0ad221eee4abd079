"""Soft local times for excursions of the simple random walk."""

__version__ = "0.1.0"
