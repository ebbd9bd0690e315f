"""Directory-level pipelines: frame alignment, batch matching, threshold sweeps.

These functions sit between the per-frame library calls and the command
line.  Frames are aligned across directories by filename stem, the KITTI
convention; a calibration argument may be a directory of per-frame files
or a single file shared by every frame.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .evaluation import EvalConfig, evaluate
from .exceptions import ConfigError, ParseError
from .kitti_io import LabelRecord, load_calibration, parse_label_file, write_label_file
from .matching import MatchWeights, cabm

logger = logging.getLogger(__name__)

LABEL_SUFFIX = ".txt"


class AlignmentError(ParseError):
    """Input directories do not hold the same set of frames."""


def list_frames(directory):
    """Sorted frame stems of the ``.txt`` files in ``directory``."""
    if not os.path.isdir(directory):
        raise ParseError(f"not a directory: {directory}")
    return sorted(f[: -len(LABEL_SUFFIX)] for f in os.listdir(directory) if f.endswith(LABEL_SUFFIX))


def align_frames(**directories):
    """Common frame stems across named directories.

    Raises:
        AlignmentError: a directory is empty, or the directories disagree;
            the message lists which frames each one is missing.
    """
    stems = {}
    for name, path in directories.items():
        found = list_frames(path)
        if not found:
            raise AlignmentError(f"{name} directory {path} contains no {LABEL_SUFFIX} frames")
        stems[name] = set(found)
    union = set().union(*stems.values())
    problems = []
    for name, found in stems.items():
        missing = sorted(union - found)
        if missing:
            shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
            problems.append(f"{name} ({directories[name]}) is missing {len(missing)} frame(s): {shown}")
    if problems:
        raise AlignmentError("misaligned frames: " + "; ".join(problems))
    return sorted(union)


def _calib_for(calib, stem):
    if os.path.isdir(calib):
        return load_calibration(os.path.join(calib, stem + LABEL_SUFFIX))
    return load_calibration(calib)


@dataclass(eq=False)
class FrameData:
    """One aligned frame: its calibration plus whichever label sets were loaded."""

    name: str
    calib: object
    labels_3d: list = None
    dets_2d: list = None
    ground_truth: list = None


def _map(fn, items, jobs):
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def load_frames(calib, labels_3d=None, dets_2d=None, ground_truth=None, jobs=1):
    """Load aligned frames from KITTI directories.

    Args:
        calib: calibration directory or single shared file.
        labels_3d: directory of 3D boxes (teacher output or detections).
        dets_2d: directory of 2D detections; 3D fields are ignored.
        ground_truth: directory of ground-truth labels.
        jobs: worker threads for parsing.

    Returns:
        list of :class:`FrameData` sorted by name.
    """
    dirs = {k: v for k, v in (("labels_3d", labels_3d), ("dets_2d", dets_2d), ("ground_truth", ground_truth)) if v}
    if not dirs:
        raise ConfigError("at least one label directory is required")
    if os.path.isdir(calib):
        dirs["calib"] = calib
    names = align_frames(**dirs)

    def load(stem):
        cal = _calib_for(calib, stem)
        frame = FrameData(stem, cal)
        if labels_3d:
            frame.labels_3d = parse_label_file(os.path.join(labels_3d, stem + LABEL_SUFFIX), calib=cal).boxes3d
        if dets_2d:
            frame.dets_2d = parse_label_file(os.path.join(dets_2d, stem + LABEL_SUFFIX), calib=cal).boxes2d
        if ground_truth:
            frame.ground_truth = parse_label_file(os.path.join(ground_truth, stem + LABEL_SUFFIX), calib=cal).boxes3d
        return frame

    return _map(load, names, jobs)


def match_frames(frames, weights=None, jobs=1):
    """Run confidence-aware matching on every frame; returns PseudoLabelSets."""
    w = weights or MatchWeights()

    def run(frame):
        return cabm(frame.labels_3d, frame.dets_2d, frame.calib.plane, frame.calib.camera, w)

    return _map(run, frames, jobs)


def pseudo_label_records(plabels):
    """File records for a pseudo-label set: matched 3D boxes, then 2D-only lines."""
    records = [LabelRecord(p.box3d, p.box2d) for p in plabels.matched_3d]
    records += [LabelRecord(None, d) for d in plabels.kept_2d]
    return records


def write_pseudo_labels(out_dir, frames, results):
    """Write one KITTI file per frame and return the counts summary."""
    os.makedirs(out_dir, exist_ok=True)
    per_frame = {}
    for frame, plabels in zip(frames, results):
        path = os.path.join(out_dir, frame.name + LABEL_SUFFIX)
        write_label_file(path, pseudo_label_records(plabels), frame.calib, with_scores=True)
        per_frame[frame.name] = plabels.counts()
    totals = {key: int(sum(c[key] for c in per_frame.values())) for key in ("matched", "kept_2d", "discarded_3d")}
    return {"frames": len(frames), "totals": totals, "per_frame": per_frame}


def sweep_values(start, stop, steps):
    """Evenly spaced sweep values; a descending range is a configuration error."""
    steps = int(steps)
    if steps < 1:
        raise ConfigError(f"sweep needs at least one step, got {steps}")
    if not np.isfinite(start) or not np.isfinite(stop):
        raise ConfigError("sweep bounds must be finite")
    if stop < start:
        raise ConfigError(f"descending sweep range: from {start} to {stop}")
    if steps == 1:
        return [float(start)]
    return [float(v) for v in np.linspace(start, stop, steps)]


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    precision: float
    recall: float
    map_overall: float
    matched: int


def threshold_sweep(frames, thresholds, weights=None, eval_cfg=None, jobs=1):
    """Match and evaluate once per threshold.

    The matched 3D pseudo-labels of each threshold are scored against the
    frames' ground truth; an empty pseudo-label set scores mAP 0.
    """
    base = weights or MatchWeights()
    cfg = eval_cfg or EvalConfig()
    gt = [f.ground_truth for f in frames]
    rows = []
    for tau in thresholds:
        w = MatchWeights(base.lambda_class, base.lambda_giou, base.lambda_conf, tau)
        results = match_frames(frames, w, jobs)
        dets = [[p.box3d for p in r.matched_3d] for r in results]
        report = evaluate(dets, gt, cfg)
        m = report.map_overall if report.map_overall is not None else 0.0
        rows.append(SweepRow(float(tau), report.precision, report.recall, m, sum(len(d) for d in dets)))
        logger.info("tau=%.4f matched=%d mAP=%.2f", tau, rows[-1].matched, m)
    return rows
