"""9-DoF CAD-to-image alignment toolkit.

Coarse pose from canonical-coordinate matching against a voxel feature
grid, followed by dense render-and-compare refinement over rotation,
translation, and per-axis scale.
"""

__version__ = "0.1.0"
