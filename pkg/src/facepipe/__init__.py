"""Real-time face detection, alignment, and recognition on a small numpy CNN engine."""

__version__ = "0.1.0"
