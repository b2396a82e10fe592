"""Keyframe dynamic radiance fields with a learned, physics-regularized velocity field."""

__version__ = "0.1.0"
