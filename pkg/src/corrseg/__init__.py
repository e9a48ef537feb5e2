"""Semi-supervised segmentation with cross-view correlation consistency."""

__version__ = "0.1.0"
