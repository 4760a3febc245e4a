"""Few-shot single-view voxel reconstruction with pose-aligned dual mixup.

Everything runs on a procedurally generated corpus of primitive shapes, so
experiments are reproducible on a laptop CPU with no external datasets.
"""

__version__ = "0.1.0"
