"""Post-processing and evaluation toolkit for unregistered RGB-thermal pedestrian detection."""

__version__ = "0.1.0"
