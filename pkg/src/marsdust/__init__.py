"""Dust detection and removal for Mars rover image patches."""

__version__ = "0.1.0"
