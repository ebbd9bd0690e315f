"""Roadside monocular 3D detection adaptation toolkit.

Camera and box geometry, confidence-aware pseudo-label matching, geometric
consistency losses, an EMA teacher, 3D detection evaluation, KITTI-style
I/O, a synthetic scene generator and a toy teacher-student loop.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("sim2road")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .adapt import LoopConfig, SelfTrainingAdapter, ToyModel, run_adaptation
from .boxes2d import Box2D, center_l1, giou_2d, iou_2d
from .ema import EmaConfig, ParamVector, ema_update
from .evaluation import EvalConfig, EvalReport, evaluate, iou_3d
from .exceptions import (
    BehindCameraError,
    CalibrationError,
    ConfigError,
    DegenerateGeometryError,
    GenerationError,
    InvalidArgumentError,
    NumericalError,
    ParseError,
    Sim2RoadError,
)
from .geometry import (
    Box3D,
    CameraModel,
    GroundPlane,
    GroundPlaneFitter,
    box_corners_world,
    fit_ground_plane,
    project_points,
    projected_aabb,
    rotation_matrix,
    unproject_points,
)
from .kitti_io import Calibration, ClassMap, load_calibration, parse_calib, parse_label_file, write_label_file
from .losses import LossWeights, coplanar_loss, overall_loss, projective_consistency_loss
from .matching import BipartiteMatcher, MatchWeights, PseudoLabelSet, cabm, hungarian
from .synth import Detector2DNoise, SceneConfig, TeacherNoise, corrupt_2d, corrupt_teacher, generate_scene

__all__ = [
    "BehindCameraError",
    "BipartiteMatcher",
    "Box2D",
    "Box3D",
    "Calibration",
    "CalibrationError",
    "CameraModel",
    "ClassMap",
    "ConfigError",
    "DegenerateGeometryError",
    "Detector2DNoise",
    "EmaConfig",
    "EvalConfig",
    "EvalReport",
    "GenerationError",
    "GroundPlane",
    "GroundPlaneFitter",
    "InvalidArgumentError",
    "LoopConfig",
    "LossWeights",
    "MatchWeights",
    "NumericalError",
    "ParamVector",
    "ParseError",
    "PseudoLabelSet",
    "SceneConfig",
    "SelfTrainingAdapter",
    "Sim2RoadError",
    "TeacherNoise",
    "ToyModel",
    "box_corners_world",
    "cabm",
    "center_l1",
    "coplanar_loss",
    "corrupt_2d",
    "corrupt_teacher",
    "ema_update",
    "evaluate",
    "fit_ground_plane",
    "generate_scene",
    "giou_2d",
    "hungarian",
    "iou_2d",
    "iou_3d",
    "load_calibration",
    "overall_loss",
    "parse_calib",
    "parse_label_file",
    "project_points",
    "projected_aabb",
    "projective_consistency_loss",
    "rotation_matrix",
    "run_adaptation",
    "unproject_points",
    "write_label_file",
]
