"""Multi-view fitting of an articulated body model to 2D joints and silhouettes."""

from .body_model import BodyModel, Mesh, load_model, save_model, skin
from .camera import CameraParams, load_cameras, project
from .optim import Stage, StageSchedule, default_pose_schedule, default_shape_schedule, dogleg_minimize
from .pose_fit import fit_pose, init_cameras
from .shape_fit import fit_shape
from .silhouette import SilhouetteMask, iou, load_mask, rasterize_silhouette, save_mask
from .toy_model import make_toy_model

__version__ = "0.1.0"

__all__ = [
    "BodyModel",
    "CameraParams",
    "Mesh",
    "SilhouetteMask",
    "Stage",
    "StageSchedule",
    "default_pose_schedule",
    "default_shape_schedule",
    "dogleg_minimize",
    "fit_pose",
    "fit_shape",
    "init_cameras",
    "iou",
    "load_cameras",
    "load_mask",
    "load_model",
    "make_toy_model",
    "project",
    "rasterize_silhouette",
    "save_mask",
    "save_model",
    "skin",
]
