"""Boundary-aware instance-segmentation decoder, environment adapter and loss on a small numpy autodiff."""

__version__ = "0.1.0"
