"""Network-free unsupervised semantic segmentation by multilevel clustering
of self-supervised ViT attention features."""

__version__ = "0.1.0"
