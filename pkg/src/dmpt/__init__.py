"""Dual-modality prompt tuning on a small frozen CLIP-style dual encoder."""

__version__ = "0.1.0"
