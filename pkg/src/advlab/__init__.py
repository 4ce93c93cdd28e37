"""Adversarial attacks, data poisoning and anomaly-detection defenses on a small numpy network engine."""

__version__ = "0.1.0"
