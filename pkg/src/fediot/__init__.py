"""Deterministic simulator of cross-silo federated learning for IoT malware detection."""

__version__ = "0.1.0"
