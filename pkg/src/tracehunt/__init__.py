"""Provenance trace completion under anti-forensic tampering."""

__version__ = "0.1.0"
