"""Triplanar attention-gated recurrent-residual U-Net for brain tumor
segmentation, with survival-days regression from encoder features."""

__version__ = "0.1.0"
