"""Point-based animatable human avatars.

Oriented point clouds are deformed by learned pose-dependent offsets and
learned skinning weights, carry part labels pinned to a template mesh and
per-point neural textures, and are meshed by spectral Poisson
reconstruction.
"""
from .avatar import Avatar, load_avatar, load_subject, save_avatar, save_subject
from .compose import EmptyPart, compose
from .config import TrainConfig
from .deformation import Architecture, DeformationModel, deform, init_deformation_model
from .evaluate import EvalReport, evaluate
from .losses import LossWeights
from .pointcloud import KdIndex, OrientedPointCloud, TriangleMesh, knn, sample_surface
from .recon import reconstruct
from .semantic import PartLabel, SemanticPointSet
from .skeleton import PoseParams, Skeleton
from .synthetic import SyntheticSubject, generate_subject

__version__ = "0.1.0"

__all__ = [
    "Architecture", "Avatar", "DeformationModel", "EmptyPart", "EvalReport", "KdIndex",
    "LossWeights", "OrientedPointCloud", "PartLabel", "PoseParams", "SemanticPointSet",
    "Skeleton", "SyntheticSubject", "TrainConfig", "TriangleMesh", "compose", "deform",
    "evaluate", "generate_subject", "init_deformation_model", "knn", "load_avatar",
    "load_subject", "reconstruct", "sample_surface", "save_avatar", "save_subject",
]
