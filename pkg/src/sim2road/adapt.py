"""Teacher-student adaptation with a toy detector, at desk scale.

The "detector" is a per-class additive bias ``(dx, dy, dz, dyaw)`` plus a
confidence offset applied to a fixed set of raw 3D detections.  Each step
the teacher's outputs are fused with 2D detections by :func:`cabm`, the
student is scored with the weighted loss (projective consistency on matched
pairs, coplanarity of its own outputs, masked pose L1 toward matched teacher
poses) and moved by central-difference gradient descent; every
``update_interval`` steps the teacher takes an EMA step toward the student.

Finite differences stand in for backpropagation; with at most 20 parameters
this is cheap.  The confidence offsets do not enter the student loss, so
their gradient is identically zero and they are not differentiated.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_positive, wrap_angle
from .ema import EmaConfig, ParamVector, ema_update, is_update_step
from .exceptions import InvalidArgumentError, NumericalError
from .kitti_io import CATEGORIES
from .losses import (
    LossWeights,
    boxes_to_arrays,
    overall_loss,
    projective_consistency_arrays,
    projective_consistency_terms,
)
from .matching import MatchWeights, cabm

logger = logging.getLogger(__name__)

N_FIELDS = 5  # dx, dy, dz, dyaw, dconf


class ToyModel:
    """Per-class bias detector over raw 3D boxes."""

    def __init__(self, params=None, classes=CATEGORIES):
        self.classes = tuple(classes)
        if params is None:
            params = ParamVector(np.zeros(N_FIELDS * len(self.classes)))
        elif not isinstance(params, ParamVector):
            params = ParamVector(params)
        if len(params) != N_FIELDS * len(self.classes):
            raise InvalidArgumentError(
                f"expected {N_FIELDS * len(self.classes)} parameters for {len(self.classes)} classes, got {len(params)}"
            )
        self.params = params

    @classmethod
    def with_bias(cls, biases, classes=CATEGORIES):
        """Build from ``{class: (dx, dy, dz, dyaw[, dconf])}``."""
        values = np.zeros((len(classes), N_FIELDS))
        for name, bias in biases.items():
            values[list(classes).index(name), : len(bias)] = bias
        return cls(values.ravel(), classes)

    @property
    def table(self):
        return self.params.values.reshape(len(self.classes), N_FIELDS)

    def bias(self, class_label):
        return self.table[self.classes.index(class_label)]

    def predict(self, raw_frames):
        """Apply the biases to per-frame lists of Box3D."""
        out = []
        for frame in raw_frames:
            boxes = []
            for b in frame:
                dx, dy, dz, dyaw, dconf = self.bias(b.class_label)
                x, y, z = b.location
                boxes.append(
                    b.replace(
                        location=(x + dx, y + dy, z + dz),
                        yaw=b.yaw + dyaw,
                        confidence=min(max(b.confidence + dconf, 0.0), 1.0),
                    )
                )
            out.append(boxes)
        return out

    def __repr__(self):
        return f"ToyModel(classes={self.classes}, params={self.params.values.tolist()})"


@dataclass(frozen=True)
class LoopConfig:
    steps: int = 2000
    learning_rate: float = 1e-4
    fd_epsilon: float = 1e-4
    ema: EmaConfig = field(default_factory=EmaConfig)
    match: MatchWeights = field(default_factory=MatchWeights)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if int(self.steps) < 1:
            raise InvalidArgumentError(f"steps must be >= 1, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise InvalidArgumentError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        check_positive(self.fd_epsilon, "fd_epsilon")


@dataclass
class AdaptationHistory:
    reports: list
    student_params: list
    teacher_params: list
    teacher: ToyModel
    student: ToyModel
    ema_steps: list = field(default_factory=list)

    @property
    def totals(self):
        return np.array([r.total for r in self.reports])

    def write_csv(self, path, interval=None):
        """One row per step; parameter snapshots on EMA interval rows."""
        n_params = len(self.student.params)
        header = ["step", "l_2d", "l_3d", "l_dmap", "l_pc", "l_moc", "total", "mask_count"]
        header += [f"student_{i}" for i in range(n_params)] + [f"teacher_{i}" for i in range(n_params)]
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for k, rep in enumerate(self.reports):
                row = [k, *(f"{getattr(rep, n):.12g}" for n in header[1:7]), rep.mask_count]
                snapshot = k == 0 or k == len(self.reports) - 1 or (interval and k % interval == 0)
                if snapshot:
                    row += [f"{v:.12g}" for v in self.student_params[k]]
                    row += [f"{v:.12g}" for v in self.teacher_params[k]]
                else:
                    row += [""] * (2 * n_params)
                w.writerow(row)


class _Problem:
    """Flattened arrays for fast repeated loss evaluation."""

    def __init__(self, scene, raw_frames, dets_2d, classes, cfg):
        self.cfg = cfg
        self.classes = classes
        self.frames = scene.frames
        self.raw_frames = raw_frames
        self.dets_2d = dets_2d
        dims, locs, yaws, cls_idx, frame_idx = [], [], [], [], []
        rolls, pitches, Ks, Es, sizes = [], [], [], [], []
        self.offsets = [0]
        for f, (frame, raw) in enumerate(zip(scene.frames, raw_frames)):
            d, l, y = boxes_to_arrays(raw)
            dims.append(d)
            locs.append(l)
            yaws.append(y)
            cls_idx += [classes.index(b.class_label) for b in raw]
            frame_idx += [f] * len(raw)
            n = len(raw)
            rolls.append(np.full(n, frame.plane.roll))
            pitches.append(np.full(n, frame.plane.pitch))
            Ks.append(np.broadcast_to(frame.camera.intrinsics, (n, 3, 3)))
            Es.append(np.broadcast_to(frame.camera.extrinsics, (n, 4, 4)))
            sizes.append(np.broadcast_to(np.asarray(frame.camera.image_size, dtype=np.float64), (n, 2)))
            self.offsets.append(self.offsets[-1] + n)
        self.dims = np.concatenate(dims) if dims else np.zeros((0, 3))
        self.base_locs = np.concatenate(locs) if locs else np.zeros((0, 3))
        self.base_yaws = np.concatenate(yaws) if yaws else np.zeros(0)
        self.cls_idx = np.asarray(cls_idx, dtype=np.int64)
        self.rolls = np.concatenate(rolls) if rolls else np.zeros(0)
        self.pitches = np.concatenate(pitches) if pitches else np.zeros(0)
        self.K = np.concatenate(Ks) if Ks else np.zeros((0, 3, 3))
        self.E = np.concatenate(Es) if Es else np.zeros((0, 4, 4))
        self.sizes = np.concatenate(sizes) if sizes else np.zeros((0, 2))
        self.n = len(self.dims)
        n_frames = len(scene.frames)
        self.frame_idx = np.asarray(frame_idx, dtype=np.int64)
        self.membership = np.zeros((n_frames, self.n))
        self.membership[self.frame_idx, np.arange(self.n)] = 1.0
        self.counts = self.membership.sum(axis=1)
        self.moc_frames = self.counts >= 4
        self.active_classes = sorted(set(self.cls_idx.tolist()))

    def refresh_targets(self, teacher):
        """Run matching on the teacher's current outputs."""
        teacher_out = teacher.predict(self.raw_frames)
        pair_obj, targets, teacher_pose = [], [], []
        mask = np.zeros(self.n, dtype=bool)
        for f, frame in enumerate(self.frames):
            plabels = cabm(teacher_out[f], self.dets_2d[f], frame.plane, frame.camera, self.cfg.match)
            for pair in plabels.matched_3d:
                g = self.offsets[f] + pair.index_3d
                pair_obj.append(g)
                targets.append(pair.box2d.as_array())
                t = teacher_out[f][pair.index_3d]
                teacher_pose.append([*t.location, t.yaw])
                mask[g] = True
        self.pair_obj = np.asarray(pair_obj, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
        self.teacher_pose = np.zeros((self.n, 4))
        if len(pair_obj):
            self.teacher_pose[self.pair_obj] = np.asarray(teacher_pose)
        self.mask = mask
        p = self.pair_obj
        self.pair_arrays = (self.dims[p], self.rolls[p], self.pitches[p], self.K[p], self.E[p], self.sizes[p])

    def _coplanarity(self, locs):
        # batched form of frame_coplanarity: smallest eigenvalue share of each frame's scatter matrix
        if not self.moc_frames.any():
            return 0.0
        means = (self.membership @ locs) / np.maximum(self.counts, 1.0)[:, None]
        centered = locs - means[self.frame_idx]
        outer = (centered[:, :, None] * centered[:, None, :]).reshape(self.n, 9)
        scatter = (self.membership @ outer).reshape(-1, 3, 3)[self.moc_frames]
        eig = np.linalg.eigvalsh(scatter)
        trace = eig.sum(axis=1)
        share = np.divide(np.clip(eig[:, 0], 0.0, None), trace, out=np.zeros_like(trace), where=trace > 0)
        return float(share.sum() / len(self.frames))

    def loss(self, values):
        table = values.reshape(len(self.classes), N_FIELDS)
        bias = table[self.cls_idx]
        locs = self.base_locs + bias[:, :3]
        yaws = self.base_yaws + bias[:, 3]
        w = self.cfg.loss
        p = self.pair_obj
        l_pc, _ = projective_consistency_arrays(
            self.dims[p],
            locs[p],
            yaws[p],
            self.rolls[p],
            self.pitches[p],
            self.K[p],
            self.E[p],
            self.targets,
            self.sizes[p],
            w,
        )
        l_moc = self._coplanarity(locs)
        diff = np.concatenate([locs, yaws[:, None]], axis=1) - self.teacher_pose
        diff[:, 3] = wrap_angle(diff[:, 3])
        l_3d = np.abs(diff).mean(axis=1)
        return overall_loss(0.0, l_3d, self.mask, 0.0, l_pc, l_moc, w)

    def batch_totals(self, batch):
        """Total loss for each row of a (B, n_params) batch of parameter vectors."""
        w = self.cfg.loss
        bias = batch.reshape(len(batch), len(self.classes), N_FIELDS)[:, self.cls_idx]
        locs = self.base_locs + bias[..., :3]
        yaws = self.base_yaws + bias[..., 3]
        p = self.pair_obj
        if len(p):
            dims, rolls, pitches, K, E, sizes = self.pair_arrays
            per_pair = projective_consistency_terms(
                dims, locs[:, p], yaws[:, p], rolls, pitches, K, E, self.targets, sizes, w
            )
            valid = ~np.isnan(per_pair)
            n_valid = valid.sum(axis=1)
            l_pc = np.where(n_valid > 0, np.where(valid, per_pair, 0.0).sum(axis=1) / np.maximum(n_valid, 1), 0.0)
        else:
            l_pc = np.zeros(len(batch))
        l_moc = self._batch_coplanarity(locs)
        diff = np.concatenate([locs, yaws[..., None]], axis=-1) - self.teacher_pose
        diff[..., 3] = wrap_angle(diff[..., 3])
        mask_count = int(self.mask.sum())
        l_3d = np.abs(diff[:, self.mask]).mean(axis=-1).mean(axis=-1) if mask_count else np.zeros(len(batch))
        return w.lambda_3d * l_3d + w.lambda_pc * l_pc + w.lambda_moc * l_moc

    def _batch_coplanarity(self, locs):
        if not self.moc_frames.any():
            return np.zeros(len(locs))
        means = (self.membership @ locs) / np.maximum(self.counts, 1.0)[:, None]
        centered = locs - means[:, self.frame_idx]
        outer = (centered[..., :, None] * centered[..., None, :]).reshape(len(locs), self.n, 9)
        scatter = (self.membership @ outer)[:, self.moc_frames].reshape(len(locs), -1, 3, 3)
        eig = np.linalg.eigvalsh(scatter)
        trace = eig.sum(axis=-1)
        share = np.divide(np.clip(eig[..., 0], 0.0, None), trace, out=np.zeros_like(trace), where=trace > 0)
        return share.sum(axis=-1) / len(self.frames)


def _check_finite(report, step):
    for name in ("l_3d", "l_pc", "l_moc", "total"):
        if not math.isfinite(getattr(report, name)):
            raise NumericalError(f"step {step}: loss term {name} is not finite ({getattr(report, name)})")


def run_adaptation(scene, teacher_init, dets_2d, cfg=None, raw_3d=None):
    """Run the teacher-student loop on a target-domain scene.

    Args:
        scene: :class:`~sim2road.synth.Scene` supplying cameras and planes.
        teacher_init: :class:`ToyModel`; the student starts as a copy.
        dets_2d: per-frame lists of Box2D from the 2D detector.
        cfg: :class:`LoopConfig`.
        raw_3d: per-frame raw detections the models bias; defaults to the
            scene's ground truth.

    Returns:
        :class:`AdaptationHistory` with ``steps + 1`` loss reports (the last
        one evaluated after the final update).
    """
    cfg = cfg or LoopConfig()
    raw = raw_3d if raw_3d is not None else scene.ground_truth
    if not (len(raw) == len(dets_2d) == len(scene.frames)):
        raise InvalidArgumentError("scene, raw detections and 2D detections must cover the same frames")
    classes = teacher_init.classes
    problem = _Problem(scene, raw, dets_2d, classes, cfg)
    teacher = teacher_init.params
    student = ParamVector(teacher.values.copy())
    problem.refresh_targets(ToyModel(teacher, classes))

    # location and yaw entries of classes that actually occur
    active = [c * N_FIELDS + k for c in problem.active_classes for k in range(4)]
    eps = cfg.fd_epsilon
    reports, s_hist, t_hist, ema_steps = [], [], [], []
    values = student.values.copy()
    for step in range(1, cfg.steps + 1):
        report = problem.loss(values)
        _check_finite(report, step)
        reports.append(report)
        s_hist.append(values.copy())
        t_hist.append(teacher.values.copy())

        grad = np.zeros_like(values)
        if cfg.learning_rate > 0:
            # all central-difference probes evaluated as one batch
            probes = np.repeat(values[None, :], 2 * len(active), axis=0)
            rows = np.arange(len(active))
            probes[2 * rows, active] += eps
            probes[2 * rows + 1, active] -= eps
            totals = problem.batch_totals(probes)
            grad[active] = (totals[0::2] - totals[1::2]) / (2.0 * eps)
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"step {step}: non-finite finite-difference gradient")
            values = values - cfg.learning_rate * grad
            yaw_slots = np.arange(3, len(values), N_FIELDS)
            values[yaw_slots] = wrap_angle(values[yaw_slots])

        if is_update_step(step, cfg.ema):
            teacher = ema_update(teacher, ParamVector(values), cfg.ema, step)
            problem.refresh_targets(ToyModel(teacher, classes))
            ema_steps.append(step)

    final = problem.loss(values)
    _check_finite(final, cfg.steps + 1)
    reports.append(final)
    s_hist.append(values.copy())
    t_hist.append(teacher.values.copy())
    return AdaptationHistory(
        reports, s_hist, t_hist, ToyModel(teacher, classes), ToyModel(ParamVector(values), classes), ema_steps
    )


class SelfTrainingAdapter(BaseEstimator):
    """Estimator front end for :func:`run_adaptation`.

    ``fit(scene, dets_2d)`` runs the loop and stores ``teacher_``,
    ``student_`` and ``history_``; ``predict(raw_frames)`` applies the
    adapted student.
    """

    def __init__(
        self,
        steps=2000,
        learning_rate=1e-4,
        fd_epsilon=1e-4,
        ema_momentum=0.999,
        ema_interval=200,
        match_weights=None,
        loss_weights=None,
    ):
        self.steps = steps
        self.learning_rate = learning_rate
        self.fd_epsilon = fd_epsilon
        self.ema_momentum = ema_momentum
        self.ema_interval = ema_interval
        self.match_weights = match_weights
        self.loss_weights = loss_weights

    def _config(self):
        return LoopConfig(
            steps=self.steps,
            learning_rate=self.learning_rate,
            fd_epsilon=self.fd_epsilon,
            ema=EmaConfig(self.ema_momentum, self.ema_interval),
            match=self.match_weights or MatchWeights(),
            loss=self.loss_weights or LossWeights(),
        )

    def fit(self, scene, dets_2d, teacher_init=None, raw_3d=None):
        teacher_init = teacher_init or ToyModel()
        self.history_ = run_adaptation(scene, teacher_init, dets_2d, self._config(), raw_3d)
        self.teacher_ = self.history_.teacher
        self.student_ = self.history_.student
        return self

    def predict(self, raw_frames):
        if not hasattr(self, "student_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("SelfTrainingAdapter is not fitted yet; call fit first")
        return self.student_.predict(raw_frames)
