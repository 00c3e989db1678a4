"""wmspoof: desk-scale lab for watermark inheritance, extraction and spoofing on n-gram models."""

__version__ = "0.1.0"
