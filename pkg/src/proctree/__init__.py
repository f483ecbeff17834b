"""Process trees: tree tensor networks for multi-time quantum processes."""
__version__ = "0.1.0"
