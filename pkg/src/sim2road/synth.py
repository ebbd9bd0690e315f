"""Deterministic synthetic roadside scenes.

All randomness comes from ``numpy.random.Generator(PCG64(seed))``; nothing
reads ambient entropy.  Sub-streams for ground truth, teacher corruption and
2D corruption are derived from the caller's seed through
``numpy.random.SeedSequence`` so they do not interact.

A scene places one pinhole camera per frame on a mast at the world origin,
looking along +x and tilted down.  Each frame has its own slightly tilted
ground plane through the mast foot; objects stand on that plane and are
kept only if all 8 corners project inside the image.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_non_negative, check_unit_interval
from .boxes2d import Box2D
from .evaluation import iou_3d
from .exceptions import BehindCameraError, GenerationError, InvalidArgumentError
from .geometry import Box3D, CameraModel, GroundPlane, box_corners_world, project_points, projected_aabb
from .kitti_io import CATEGORIES, Calibration, LabelRecord, write_calib, write_label_file

DEFAULT_SIZE_PRIORS = {
    # (length, width, height) mean and relative spread
    "Car": ((4.5, 1.85, 1.5), 0.08),
    "Pedestrian": ((0.6, 0.6, 1.75), 0.1),
    "Cyclist": ((1.8, 0.7, 1.7), 0.1),
    "BigVehicle": ((11.0, 2.6, 3.4), 0.15),
}


def exponential_confidence(scale=1.0):
    """Confidence model ``exp(-magnitude / scale)``; zero perturbation gives 1."""

    def model(magnitude):
        return float(math.exp(-magnitude / scale))

    return model


@dataclass
class TeacherNoise:
    """Perturbation model for simulated teacher 3D detections.

    ``false_positive_rate`` is the Poisson mean of injected false positives
    per frame.  ``confidence_model`` maps the perturbation magnitude
    ``|d_location| + |d_yaw| + |relative d_size|`` to a confidence.
    """

    location_sigma: tuple = (0.0, 0.0, 0.0)
    yaw_sigma: float = 0.0
    size_sigma: float = 0.0
    drop_rate: float = 0.0
    false_positive_rate: float = 0.0
    confidence_model: object = field(default_factory=exponential_confidence)
    fp_confidence: tuple = (0.05, 0.6)

    def __post_init__(self):
        check_unit_interval(self.drop_rate, "drop_rate")
        check_non_negative(self.false_positive_rate, "false_positive_rate")
        if len(self.location_sigma) != 3 or min(self.location_sigma) < 0:
            raise InvalidArgumentError("location_sigma needs three non-negative values")


@dataclass
class Detector2DNoise:
    """Perturbation model for simulated 2D detector output.

    ``jitter`` is the pixel standard deviation applied to each rectangle
    edge; ``false_positive_rate`` is the Poisson mean of spurious boxes per
    frame; ``class_flip`` the probability of reporting a wrong category.
    """

    jitter: float = 0.0
    drop_rate: float = 0.0
    false_positive_rate: float = 0.0
    class_flip: float = 0.0
    confidence: tuple = (0.5, 0.99)
    fp_confidence: tuple = (0.05, 0.6)

    def __post_init__(self):
        check_unit_interval(self.drop_rate, "drop_rate")
        check_unit_interval(self.class_flip, "class_flip")
        if self.jitter < 0 or self.false_positive_rate < 0:
            raise InvalidArgumentError("jitter and false_positive_rate must be non-negative")


@dataclass
class SceneConfig:
    seed: int = 0
    n_frames: int = 10
    objects_per_frame: tuple = (4, 12)
    class_proportions: dict = field(
        default_factory=lambda: {"Car": 0.6, "Pedestrian": 0.15, "Cyclist": 0.1, "BigVehicle": 0.15}
    )
    size_priors: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_PRIORS))
    placement_range: tuple = (10.0, 120.0)
    camera_height: tuple = (7.0, 9.0)
    camera_pitch: tuple = (0.12, 0.2)
    camera_roll: tuple = (-0.02, 0.02)
    plane_tilt: float = 0.03
    focal_length: float = 2000.0
    image_size: tuple = (1920, 1080)
    max_retries: int = 2000
    teacher_noise: TeacherNoise = field(default_factory=TeacherNoise)
    detector_noise: Detector2DNoise = field(default_factory=Detector2DNoise)

    def __post_init__(self):
        total = sum(self.class_proportions.values())
        if abs(total - 1.0) > 1e-9:
            raise InvalidArgumentError(f"class proportions must sum to 1, got {total}")
        unknown = set(self.class_proportions) - set(CATEGORIES)
        if unknown:
            raise InvalidArgumentError(f"unknown classes in proportions: {sorted(unknown)}")
        lo, hi = self.placement_range
        if not 0.0 < lo < hi <= 120.0:
            raise InvalidArgumentError(f"placement_range must satisfy 0 < lo < hi <= 120, got {self.placement_range}")
        mn, mx = self.objects_per_frame
        if not 0 <= mn <= mx:
            raise InvalidArgumentError(f"invalid objects_per_frame {self.objects_per_frame}")
        if self.n_frames < 0:
            raise InvalidArgumentError("n_frames must be non-negative")


@dataclass(eq=False)
class Frame:
    name: str
    gt: list
    plane: GroundPlane
    camera: CameraModel

    @property
    def calibration(self):
        return Calibration(self.camera, self.plane)


@dataclass(eq=False)
class Scene:
    frames: list
    config: SceneConfig = None

    def __len__(self):
        return len(self.frames)

    @property
    def ground_truth(self):
        return [f.gt for f in self.frames]


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def make_camera(height, pitch, roll, focal_length=2000.0, image_size=(1920, 1080)):
    """Camera at ``(0, 0, height)`` looking along +x, tilted down by ``pitch``."""
    # camera axes in world coordinates for a level camera looking along +x
    right = np.array([0.0, -1.0, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    forward = np.array([1.0, 0.0, 0.0])
    R_cw = np.stack([right, down, forward], axis=1)
    cp, sp = math.cos(pitch), math.sin(pitch)
    tilt = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    cr, sr = math.cos(roll), math.sin(roll)
    spin = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    R_cw = R_cw @ tilt @ spin
    R_wc = R_cw.T
    center = np.array([0.0, 0.0, height])
    width, h = image_size
    return CameraModel.from_parameters(
        focal_length, focal_length, width / 2.0, h / 2.0, R_wc, -R_wc @ center, width, h
    )


def _inside_image(box, plane, cam):
    try:
        uvd = project_points(box_corners_world(box, plane), cam)
    except BehindCameraError:
        return False
    return bool(
        np.all(uvd[:, 0] >= 0) and np.all(uvd[:, 0] <= cam.image_width)
        and np.all(uvd[:, 1] >= 0) and np.all(uvd[:, 1] <= cam.image_height)
    )


def _sample_box(rng, cfg, cls, plane, cam):
    (ml, mw, mh), spread = cfg.size_priors[cls]
    scale = np.clip(1.0 + spread * rng.standard_normal(3), 0.5, 1.5)
    lo, hi = cfg.placement_range
    half_fov = math.atan2(cam.image_width / 2.0, cam.fx)
    for _ in range(cfg.max_retries):
        r = rng.uniform(lo, hi)
        az = rng.uniform(-half_fov, half_fov)
        x, y = r * math.cos(az), r * math.sin(az)
        box = Box3D(
            cls,
            ml * scale[0],
            mw * scale[1],
            mh * scale[2],
            (x, y, plane.height_at(x, y)),
            rng.uniform(-math.pi, math.pi),
            1.0,
        )
        if _inside_image(box, plane, cam):
            return box
    raise GenerationError(f"could not place a {cls} inside the image after {cfg.max_retries} tries")


def generate_scene(cfg=None):
    """Build a deterministic scene of ground-truth boxes, planes and cameras."""
    cfg = cfg or SceneConfig()
    rng = _streams(cfg.seed, 1)[0]
    classes = list(cfg.class_proportions)
    probs = np.array([cfg.class_proportions[c] for c in classes])
    frames = []
    for k in range(cfg.n_frames):
        height = rng.uniform(*cfg.camera_height)
        cam = make_camera(
            height,
            rng.uniform(*cfg.camera_pitch),
            rng.uniform(*cfg.camera_roll),
            cfg.focal_length,
            cfg.image_size,
        )
        plane = GroundPlane.from_angles(
            rng.uniform(-cfg.plane_tilt, cfg.plane_tilt),
            rng.uniform(-cfg.plane_tilt, cfg.plane_tilt),
        )
        n = int(rng.integers(cfg.objects_per_frame[0], cfg.objects_per_frame[1] + 1))
        boxes = []
        attempts = 0
        while len(boxes) < n:
            attempts += 1
            if attempts > cfg.max_retries:
                raise GenerationError(f"frame {k}: could not place {n} non-overlapping objects")
            cls = classes[int(rng.choice(len(classes), p=probs))]
            box = _sample_box(rng, cfg, cls, plane, cam)
            if any(iou_3d(box, other) > 0.0 for other in boxes):
                continue
            boxes.append(box)
        frames.append(Frame(f"{k:06d}", boxes, plane, cam))
    return Scene(frames, cfg)


def corrupt_teacher(scene, noise=None, seed=0):
    """Simulated teacher output: perturbed, thinned and polluted ground truth."""
    noise = noise or TeacherNoise()
    rng = _streams(seed, 2)[1]
    sigma = np.asarray(noise.location_sigma, dtype=np.float64)
    out = []
    for frame in scene.frames:
        boxes = []
        for gt in frame.gt:
            if rng.random() < noise.drop_rate:
                continue
            d_loc = sigma * rng.standard_normal(3)
            d_yaw = noise.yaw_sigma * rng.standard_normal()
            d_size = noise.size_sigma * rng.standard_normal(3)
            scale = np.clip(1.0 + d_size, 0.2, None)
            magnitude = float(np.linalg.norm(d_loc) + abs(d_yaw) + np.abs(scale - 1.0).sum())
            conf = min(max(noise.confidence_model(magnitude), 0.0), 1.0)
            boxes.append(
                Box3D(
                    gt.class_label,
                    gt.length * scale[0],
                    gt.width * scale[1],
                    gt.height * scale[2],
                    tuple(np.asarray(gt.location) + d_loc),
                    gt.yaw + d_yaw,
                    conf,
                )
            )
        for _ in range(int(rng.poisson(noise.false_positive_rate))):
            cls = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            cfg = scene.config or SceneConfig()
            fp = _sample_box(rng, cfg, cls, frame.plane, frame.camera)
            boxes.append(fp.replace(confidence=float(rng.uniform(*noise.fp_confidence))))
        out.append(boxes)
    return out


def corrupt_2d(scene, noise=None, seed=0):
    """Simulated 2D detector output built from projected ground truth."""
    noise = noise or Detector2DNoise()
    rng = _streams(seed, 3)[2]
    out = []
    for frame in scene.frames:
        cam = frame.camera
        dets = []
        for gt in frame.gt:
            if rng.random() < noise.drop_rate:
                continue
            rect = projected_aabb(gt, frame.plane, cam).as_array()
            if noise.jitter > 0:
                rect = rect + noise.jitter * rng.standard_normal(4)
                rect = np.array([min(rect[0], rect[2] - 1.0), min(rect[1], rect[3] - 1.0), rect[2], rect[3]])
            label = gt.class_label
            if rng.random() < noise.class_flip:
                others = [c for c in CATEGORIES if c != label]
                label = others[int(rng.integers(len(others)))]
            conf = float(rng.uniform(*noise.confidence))
            dets.append(Box2D(label, *rect, conf))
        for _ in range(int(rng.poisson(noise.false_positive_rate))):
            w = rng.uniform(20.0, 300.0)
            h = rng.uniform(20.0, 300.0)
            x0 = rng.uniform(0.0, cam.image_width - w)
            y0 = rng.uniform(0.0, cam.image_height - h)
            cls = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            dets.append(Box2D(cls, x0, y0, x0 + w, y0 + h, float(rng.uniform(*noise.fp_confidence))))
        out.append(dets)
    return out


def write_scene(scene, out_dir, teacher=None, dets_2d=None):
    """Serialize a scene to KITTI label and calibration directories.

    Layout: ``label_2/`` ground truth, ``calib/`` per-frame calibration,
    optional ``teacher_3d/`` scored 3D detections and ``dets_2d/`` 2D-only
    detection lines.
    """
    dirs = {"label_2": scene.ground_truth, "teacher_3d": teacher, "dets_2d": dets_2d}
    for name, payload in dirs.items():
        if payload is not None:
            os.makedirs(os.path.join(out_dir, name), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "calib"), exist_ok=True)
    for k, frame in enumerate(scene.frames):
        calib = frame.calibration
        write_calib(os.path.join(out_dir, "calib", f"{frame.name}.txt"), frame.camera, frame.plane)
        write_label_file(
            os.path.join(out_dir, "label_2", f"{frame.name}.txt"),
            [LabelRecord(b, None) for b in frame.gt],
            calib,
        )
        if teacher is not None:
            write_label_file(
                os.path.join(out_dir, "teacher_3d", f"{frame.name}.txt"),
                [LabelRecord(b, None) for b in teacher[k]],
                calib,
                with_scores=True,
            )
        if dets_2d is not None:
            write_label_file(
                os.path.join(out_dir, "dets_2d", f"{frame.name}.txt"),
                [LabelRecord(None, d) for d in dets_2d[k]],
                calib,
                with_scores=True,
            )
