"""Unsupervised longitudinal lesion-change detection with SuperMix augmentation."""

__version__ = "0.1.0"
