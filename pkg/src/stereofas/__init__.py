"""Weakly supervised stereo face anti-spoofing from rectified image pairs."""

__version__ = "0.1.0"
