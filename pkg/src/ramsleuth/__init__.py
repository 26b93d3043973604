"""Memory-image dumping, translation and hidden kernel object detection."""

__version__ = "0.1.0"
