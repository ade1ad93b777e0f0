"""Certified reduced-basis models whose snapshots are adaptive wavelet solutions."""

__version__ = "0.1.0"
