"""Desk-scale virtual unwrapping and ink detection on synthetic CT volumes.

The pipeline runs from a simulated scan to a legibility report: phantom
generation with known ink ground truth, sheet segmentation by particle-chain
tracing, conformal flattening, surface-volume resampling, photo-to-surface
label alignment, per-voxel ink classification with region cross-validation,
and pixel/character-level evaluation.
"""

__version__ = "0.1.0"
