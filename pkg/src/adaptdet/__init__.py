"""Open-set object detection by class-agnostic segmentation and gallery matching."""

__version__ = "0.1.0"
