"""Desk-scale simulator of a malicious NVMe SSD attached to a simulated host."""

__version__ = "0.1.0"
