"""Two-stage biometric ROI detection from scratch on numpy."""

__version__ = "0.1.0"
