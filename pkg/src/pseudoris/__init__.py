"""Pseudo referring-segmentation annotations from unlabeled images."""

__version__ = "0.1.0"

from . import synthworld as _synthworld  # noqa: F401  registers the synthetic backends
