"""Privileged-features distillation for CTR ranking with calibration-compatible listwise losses."""

__version__ = "0.1.0"
