"""Patch-wise polynomial height-field surfaces with jet-coefficient deformation.

Surfaces are partitioned into patches, each canonicalized into a frame where
it is a height graph and fitted with an n-jet polynomial. Deformation solvers
then optimize the compact coefficient state under geometric and
physics-inspired losses: a template tracker driven by 3D observations and a
learning-free garment draper on analytic capsule bodies.
"""

from .families import FamilySpec, bessel_j0, sample_family
from .frames import Orientation, pca_frame, refine_rotation, to_canonical
from .jets import JetPatch, fit, fit_patch
from .losses import LossReport, LossWeights, SdfBody, sphere_body, total_loss
from .mesh import TriMesh, load_obj, save_obj
from .metrics import MetricSet, chamfer, collision_pct, strain_pcts
from .optim import AdamParams, DeformState, WindowSchedule, adam_step, optimize_window
from .partition import PatchDecomposition, boundary_samples, partition, target_patch_count
from .skinning import Pose, Skeleton, SkinWeights, pose_joints, skin_points
from .solvers import (DrapeScene, SftScene, build_drape_scene, build_sft_scene,
                      drape_dynamic, drape_static, reconstruct_sequence)

__version__ = "0.1.0"

__all__ = [
    "FamilySpec", "bessel_j0", "sample_family",
    "Orientation", "pca_frame", "refine_rotation", "to_canonical",
    "JetPatch", "fit", "fit_patch",
    "LossReport", "LossWeights", "SdfBody", "sphere_body", "total_loss",
    "TriMesh", "load_obj", "save_obj",
    "MetricSet", "chamfer", "collision_pct", "strain_pcts",
    "AdamParams", "DeformState", "WindowSchedule", "adam_step", "optimize_window",
    "PatchDecomposition", "boundary_samples", "partition", "target_patch_count",
    "Pose", "Skeleton", "SkinWeights", "pose_joints", "skin_points",
    "DrapeScene", "SftScene", "build_drape_scene", "build_sft_scene",
    "drape_dynamic", "drape_static", "reconstruct_sequence",
    "__version__",
]
