"""Multi-scale FCN cascade detector built on a small numpy network kernel."""

__version__ = "0.1.0"
