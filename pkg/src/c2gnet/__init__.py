"""Object-grid image compression (PriorityShift) and compact CNN training."""

__version__ = "0.1.0"
