"""Selective-scan spatiotemporal token selector with baselines and a desk-scale harness."""

__version__ = "0.1.0"
