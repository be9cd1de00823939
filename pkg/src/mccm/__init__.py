"""Dual-channel (RGB + DFT) synthetic face detection with cross-modal focal loss, at desk scale."""

__version__ = "0.1.0"
