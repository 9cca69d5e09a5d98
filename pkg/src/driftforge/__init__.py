"""Concept-drift countermeasure experiments for malware feature vectors."""

__version__ = "0.1.0"
