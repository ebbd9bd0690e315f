"""KITTI-format labels, calibration files, class mapping and dataset statistics.

Axis convention
---------------
KITTI lines store boxes in the camera frame (x right, y down, z forward)
with ``location`` at the bottom center, ``dimensions`` as ``h w l`` and
``rotation_y`` about the camera y axis.  Conversion to the world frame:

* ``location_world = R^T (location_cam - t)`` where ``E = [R | t]`` maps
  world to camera;
* ``yaw = a - rotation_y`` where ``a`` is the azimuth in the world x-y plane
  of the camera's x axis, ``a = atan2(R[0, 1], R[0, 0])``.

For a level camera this is exactly the physical heading; for tilted cameras
it is a bijection that keeps round trips lossless.

Calibration grammar
-------------------
UTF-8 text, one ``key: values`` entry per line, ``#`` starts a comment::

    K: fx 0 cx 0 fy cy 0 0 1              # 9 floats, row-major (required)
    E: r00 r01 r02 tx ... 0 0 0 1         # 16 floats, row-major (required)
    image_size: 1920 1080                 # optional, default 1920 1080
    plane: nx ny nz offset                # optional, default 0 0 1 0
"""

import csv
import io
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._validation import wrap_angle
from .boxes2d import Box2D
from .exceptions import CalibrationError, InvalidArgumentError, ParseError, Sim2RoadError
from .geometry import Box3D, CameraModel, GroundPlane, projected_aabb

logger = logging.getLogger(__name__)

CATEGORIES = ("Car", "Pedestrian", "Cyclist", "BigVehicle")
IGNORE = "Ignore"
SENTINEL = -1000.0

RAW_CLASSES = (
    "Car",
    "Truck",
    "Trailer",
    "Van",
    "Motorcycle",
    "Bus",
    "Pedestrian",
    "Bicycle",
    "Emergency_Vehicle",
    "Other",
)

_DEFAULT_MAPPING = {
    "car": "Car",
    "van": "Car",
    "truck": "BigVehicle",
    "trailer": "BigVehicle",
    "bus": "BigVehicle",
    "emergency_vehicle": "BigVehicle",
    "motorcycle": "Cyclist",
    "bicycle": "Cyclist",
    "pedestrian": "Pedestrian",
    "other": IGNORE,
    "dontcare": IGNORE,
    # already-mapped categories pass through
    "cyclist": "Cyclist",
    "bigvehicle": "BigVehicle",
    "big_vehicle": "BigVehicle",
}


@dataclass(frozen=True)
class ClassMap:
    """Case-insensitive map from raw class names to evaluation categories."""

    mapping: dict = field(default_factory=lambda: dict(_DEFAULT_MAPPING))

    def __post_init__(self):
        lowered = {k.lower(): v for k, v in self.mapping.items()}
        for v in lowered.values():
            if v not in CATEGORIES and v != IGNORE:
                raise InvalidArgumentError(f"class map target {v!r} is not an evaluation category")
        missing = [c for c in RAW_CLASSES if c.lower() not in lowered]
        if missing:
            raise InvalidArgumentError(f"class map does not cover raw classes {missing}")
        object.__setattr__(self, "mapping", lowered)

    def __call__(self, raw):
        return self.mapping.get(raw.lower(), IGNORE)


@dataclass
class LabelRecord:
    """One parsed label line: a 3D box (``None`` for 2D-only lines) and its image box."""

    box3d: Box3D = None
    box2d: Box2D = None
    raw_class: str = ""

    @property
    def has_3d(self):
        return self.box3d is not None


@dataclass
class LabelFile:
    records: list = field(default_factory=list)
    ignored: int = 0

    @property
    def boxes3d(self):
        return [r.box3d for r in self.records if r.box3d is not None]

    @property
    def boxes2d(self):
        return [r.box2d for r in self.records if r.box2d is not None]

    @property
    def mask_3d(self):
        return [r.has_3d for r in self.records]

    def __len__(self):
        return len(self.records)


@dataclass(eq=False)
class Calibration:
    camera: CameraModel
    plane: GroundPlane = field(default_factory=GroundPlane.flat)


# -- calibration --------------------------------------------------------------


def parse_calib_text(text, source="<calib>"):
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise CalibrationError(f"{source}:{lineno}: expected 'key: values'")
        key, _, values = line.partition(":")
        try:
            entries[key.strip()] = [float(v) for v in values.split()]
        except ValueError as exc:
            raise CalibrationError(f"{source}:{lineno}: {exc}") from exc
    expected = {"K": 9, "E": 16}
    for key, count in expected.items():
        if key not in entries:
            raise CalibrationError(f"{source}: missing required key '{key}'")
        if len(entries[key]) != count:
            raise CalibrationError(f"{source}: key '{key}' needs {count} numbers, got {len(entries[key])}")
    size = entries.get("image_size", [1920, 1080])
    if len(size) != 2:
        raise CalibrationError(f"{source}: key 'image_size' needs 2 numbers")
    try:
        camera = CameraModel(
            np.array(entries["K"]).reshape(3, 3),
            np.array(entries["E"]).reshape(4, 4),
            int(size[0]),
            int(size[1]),
        )
    except CalibrationError as exc:
        raise CalibrationError(f"{source}: {exc}") from exc
    plane = GroundPlane.flat()
    if "plane" in entries:
        vals = entries["plane"]
        if len(vals) != 4:
            raise CalibrationError(f"{source}: key 'plane' needs 4 numbers")
        try:
            plane = GroundPlane.from_normal(vals[:3], vals[3])
        except Sim2RoadError as exc:
            raise CalibrationError(f"{source}: invalid plane: {exc}") from exc
    return Calibration(camera, plane)


def load_calibration(path):
    """Read a calibration file into a :class:`Calibration` (camera plus ground plane)."""
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise CalibrationError(f"cannot read calibration {path}: {exc}") from exc
    return parse_calib_text(text, source=str(path))


def parse_calib(path):
    """Read a calibration file and return its :class:`CameraModel`."""
    return load_calibration(path).camera


def format_calib(camera, plane=None):
    def row(values):
        return " ".join(repr(float(v)) for v in np.asarray(values).ravel())

    lines = [
        f"K: {row(camera.intrinsics)}",
        f"E: {row(camera.extrinsics)}",
        f"image_size: {camera.image_width} {camera.image_height}",
    ]
    if plane is not None:
        lines.append(f"plane: {row(plane.normal)} {float(plane.offset)!r}")
    return "\n".join(lines) + "\n"


def write_calib(path, camera, plane=None):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_calib(camera, plane))


# -- axis conversion ------------------------------------------------------------


def camera_azimuth(camera):
    R = camera.rotation
    return math.atan2(R[0, 1], R[0, 0])


def kitti_to_world(h, w, l, location_cam, rotation_y, camera):
    loc = camera.camera_to_world(np.asarray(location_cam, dtype=np.float64)[None])[0]
    yaw = wrap_angle(camera_azimuth(camera) - rotation_y)
    return (l, w, h), tuple(loc), yaw


def world_to_kitti(box, camera):
    loc_cam = camera.world_to_camera(np.asarray(box.location)[None])[0]
    rotation_y = wrap_angle(camera_azimuth(camera) - box.yaw)
    return (box.height, box.width, box.length), tuple(loc_cam), rotation_y


# -- label lines ----------------------------------------------------------------


def _parse_line(line, lineno, path, class_map, calib):
    fields = line.split()
    if len(fields) not in (15, 16):
        raise ParseError(f"expected 15 or 16 fields, got {len(fields)}", path, lineno)
    raw_class = fields[0]
    try:
        nums = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise ParseError(f"non-numeric field: {exc}", path, lineno) from exc
    label = class_map(raw_class)
    if label == IGNORE:
        return None
    score = nums[14] if len(nums) == 15 else 1.0
    if not 0.0 <= score <= 1.0:
        raise ParseError(f"score {score} outside [0, 1]", path, lineno)
    left, top, right, bottom = nums[3:7]
    h, w, l = nums[7:10]
    loc = nums[10:13]
    ry = nums[13]
    box2d = None
    if left < right and top < bottom:
        box2d = Box2D(label, left, top, right, bottom, score)
    if all(v == SENTINEL for v in (h, w, l, *loc)):
        if box2d is None:
            raise ParseError("2D-only line has an empty bbox", path, lineno)
        return LabelRecord(None, box2d, raw_class)
    if min(h, w, l) <= 0:
        raise ParseError(f"dimensions must be positive, got h={h} w={w} l={l}", path, lineno)
    if calib is None:
        raise CalibrationError(f"{path}: calibration is required to convert 3D labels")
    dims, loc_w, yaw = kitti_to_world(h, w, l, loc, ry, calib.camera)
    try:
        box3d = Box3D(label, *dims, loc_w, yaw, score)
    except Sim2RoadError as exc:
        raise ParseError(str(exc), path, lineno) from exc
    return LabelRecord(box3d, box2d, raw_class)


def parse_label_text(text, class_map=None, calib=None, source="<labels>"):
    class_map = class_map or ClassMap()
    if isinstance(calib, CameraModel):
        calib = Calibration(calib)
    out = LabelFile()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        rec = _parse_line(line, lineno, source, class_map, calib)
        if rec is None:
            out.ignored += 1
        else:
            out.records.append(rec)
    if out.ignored:
        logger.debug("%s: dropped %d ignored line(s)", source, out.ignored)
    return out


def parse_label_file(path, class_map=None, calib=None):
    """Parse a KITTI label or detection file into world-frame records.

    Args:
        path: file to read.
        class_map: :class:`ClassMap`; lines mapping to ``Ignore`` are dropped
            and counted in ``LabelFile.ignored``.
        calib: :class:`Calibration` or :class:`CameraModel`; required when the
            file holds 3D boxes.

    Returns:
        :class:`LabelFile`.
    """
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse_label_text(text, class_map, calib, source=str(path))


def _fmt(v):
    return f"{v:.8f}"


def format_label_line(box3d=None, box2d=None, calib=None, score=None):
    """Format one KITTI line; ``score`` adds the 16th field with 6 decimals."""
    if box3d is None and box2d is None:
        raise InvalidArgumentError("a label line needs a 3D or a 2D box")
    label = (box3d or box2d).class_label
    if label not in CATEGORIES:
        raise InvalidArgumentError(f"refusing to write class {label!r}; only {CATEGORIES} are writable")
    if box3d is not None:
        if calib is None:
            raise CalibrationError("calibration is required to write 3D boxes")
        camera = calib.camera if isinstance(calib, Calibration) else calib
        (h, w, l), loc, ry = world_to_kitti(box3d, camera)
        alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
        if box2d is None:
            plane = calib.plane if isinstance(calib, Calibration) else GroundPlane.flat()
            try:
                box2d = projected_aabb(box3d, plane, camera)
            except Sim2RoadError:
                box2d = None
        three_d = [h, w, l, *loc, ry]
    else:
        alpha = -10.0
        three_d = [SENTINEL] * 7
    bbox = box2d.as_array().tolist() if box2d is not None else [0.0, 0.0, 0.0, 0.0]
    fields = [label, "0.00", "0", _fmt(alpha)] + [_fmt(v) for v in bbox] + [_fmt(v) for v in three_d]
    if score is not None:
        fields.append(f"{float(score):.6f}")
    return " ".join(fields)


def write_label_file(path, records, calib=None, with_scores=False):
    """Write records as a KITTI file; inverse of :func:`parse_label_file`.

    Args:
        path: destination.
        records: iterable of :class:`LabelRecord` or ``(box3d, box2d)`` tuples.
        calib: calibration used for the world-to-camera conversion.
        with_scores: write the 16-field detection layout.
    """
    lines = []
    for rec in records:
        if isinstance(rec, LabelRecord):
            b3, b2 = rec.box3d, rec.box2d
        else:
            b3, b2 = rec
        score = None
        if with_scores:
            score = (b3 or b2).confidence
        lines.append(format_label_line(b3, b2, calib, score))
    text = "".join(line + "\n" for line in lines)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


# -- statistics -------------------------------------------------------------------

YAW_BINS = 36


def dataset_stats(frames):
    """Class counts, labels-per-frame histogram and yaw histogram.

    Args:
        frames: list of per-frame lists of Box3D.
    """
    class_counts = Counter()
    per_frame = Counter()
    yaw_hist = np.zeros(YAW_BINS, dtype=np.int64)
    width = 2.0 * math.pi / YAW_BINS
    for frame in frames:
        per_frame[len(frame)] += 1
        for box in frame:
            class_counts[box.class_label] += 1
            k = int(math.floor((box.yaw + math.pi) / width))
            yaw_hist[min(max(k, 0), YAW_BINS - 1)] += 1
    edges = [-math.pi + k * width for k in range(YAW_BINS + 1)]
    return {
        "class_counts": dict(sorted(class_counts.items())),
        "labels_per_frame": {int(k): int(v) for k, v in sorted(per_frame.items())},
        "yaw_histogram": {"counts": yaw_hist.tolist(), "bin_edges": edges},
        "num_frames": len(frames),
        "num_labels": int(sum(class_counts.values())),
    }


def stats_to_csv(stats):
    """Render the three histograms as CSV text keyed by table name."""
    tables = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "count"])
    for k, v in stats["class_counts"].items():
        w.writerow([k, v])
    tables["class_counts"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["labels_per_frame", "frames"])
    for k, v in stats["labels_per_frame"].items():
        w.writerow([k, v])
    tables["labels_per_frame"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["yaw_low", "yaw_high", "count"])
    edges = stats["yaw_histogram"]["bin_edges"]
    for k, c in enumerate(stats["yaw_histogram"]["counts"]):
        w.writerow([f"{edges[k]:.6f}", f"{edges[k + 1]:.6f}", c])
    tables["yaw_histogram"] = buf.getvalue()
    return tables


def write_stats(stats, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    for name, text in stats_to_csv(stats).items():
        with open(os.path.join(out_dir, f"{name}.csv"), "w", encoding="utf-8") as f:
            f.write(text)
