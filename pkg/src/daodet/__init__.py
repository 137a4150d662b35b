"""Domain-adaptive two-stage object detection with a mean-teacher student."""

__version__ = "0.1.0"
