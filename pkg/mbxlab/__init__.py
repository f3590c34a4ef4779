"""Functionality-preserving evasion attacks and defenses for byte-level malware detectors"""

__version__ = "1.0.0"
