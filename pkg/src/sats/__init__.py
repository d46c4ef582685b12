"""Symmetry-aware Siamese lesion segmentation with a numpy autodiff engine."""

from .volume import BinaryMask, RigidParams, Volume

__all__ = ["BinaryMask", "RigidParams", "Volume"]
__version__ = "0.1.0"
