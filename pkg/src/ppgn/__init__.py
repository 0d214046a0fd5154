"""Two-stage graph networks for fault localisation on distribution feeders."""

__version__ = "0.1.0"
