"""Oil-spill segmentation and categorisation on SAR backscatter rasters."""

__version__ = "0.1.0"
