"""Attribution robustness toolkit: IG, rank metrics, attribution attacks and IGR training."""

__version__ = "0.1.0"
