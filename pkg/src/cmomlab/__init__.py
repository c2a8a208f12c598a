"""Domain-adaptive video segmentation on a synthetic moving-shapes benchmark:
cross-domain video mixing, temporal feature alignment and self-training."""

__version__ = "0.1.0"
