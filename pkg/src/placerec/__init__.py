"""Visual place recognition heads, losses, label alignment and evaluation in numpy."""

__version__ = "0.1.0"
