"""Confidence-weighted point cloud normal estimation."""

import os

# the model's matrices are small; BLAS thread fan-out only adds sync cost
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .cloud import KdIndex, PointCloud, load_normals, load_xyz, save_normals, save_xyz
from .errors import PcnormalsError
from .model import ModelConfig
from .sampling import GlobalSet, Patch, sample_global, sample_local_patch

__version__ = "0.1.0"

__all__ = [
    "GlobalSet",
    "KdIndex",
    "ModelConfig",
    "Patch",
    "PcnormalsError",
    "PointCloud",
    "load_normals",
    "load_xyz",
    "sample_global",
    "sample_local_patch",
    "save_normals",
    "save_xyz",
    "__version__",
]
