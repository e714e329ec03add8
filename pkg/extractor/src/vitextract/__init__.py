"""DINO / DINOv2 feature extraction for the clustering segmentation engine."""

__version__ = "0.1.0"
