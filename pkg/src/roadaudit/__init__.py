"""Road-surface defect segmentation, tagging, and geo-audit toolkit."""

__version__ = "0.1.0"
