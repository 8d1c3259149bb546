"""Stereo-aware 3D object detection at desk scale.

Everything runs on a small numpy-backed tensor library with reverse-mode
differentiation; there is no GPU path and no external ML framework.
"""

__version__ = "0.1.0"
