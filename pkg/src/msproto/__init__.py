"""Multi-scale grouped prototype learning for interpretable segmentation."""

__version__ = "0.1.0"
