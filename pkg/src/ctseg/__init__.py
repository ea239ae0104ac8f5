"""Lung segmentation on CT volumes with a dilated residual network."""

__version__ = "0.1.0"
