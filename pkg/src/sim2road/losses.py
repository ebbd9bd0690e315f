"""Geometric consistency losses and their weighted composition."""

import logging
from dataclasses import dataclass

import numpy as np

from ._validation import check_non_negative, check_same_length
from .boxes2d import center_l1_arrays, giou_arrays
from .exceptions import InvalidArgumentError
from .geometry import EPS_DEPTH, corners_from_arrays, project_arrays

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_2d: float = 1.0
    lambda_3d: float = 1.0
    lambda_dmap: float = 1.0
    lambda_pc: float = 1.0
    lambda_moc: float = 1.0
    lambda_giou_pc: float = 1.0
    lambda_center_pc: float = 1.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            object.__setattr__(self, name, check_non_negative(getattr(self, name), name))


@dataclass(frozen=True)
class LossReport:
    l_2d: float
    l_3d: float
    l_dmap: float
    l_pc: float
    l_moc: float
    total: float
    mask_count: int

    def as_dict(self):
        return {
            "l_2d": self.l_2d,
            "l_3d": self.l_3d,
            "l_dmap": self.l_dmap,
            "l_pc": self.l_pc,
            "l_moc": self.l_moc,
            "total": self.total,
            "mask_count": self.mask_count,
        }


def boxes_to_arrays(boxes):
    """Split a list of Box3D into (dims, locations, yaws) arrays."""
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    dims = np.array([b.dimensions for b in boxes], dtype=np.float64)
    locs = np.array([b.location for b in boxes], dtype=np.float64)
    yaws = np.array([b.yaw for b in boxes], dtype=np.float64)
    return dims, locs, yaws


def projective_consistency_terms(dims, locs, yaws, rolls, pitches, K, E, targets, image_dims, weights):
    """Per-pair projective consistency, NaN where a corner is behind the camera.

    Pair arrays carry a trailing pair axis N and may have extra leading
    batch dimensions: ``dims``/``locs`` (..., N, 3), angles (..., N), ``K``
    (N, 3, 3), ``E`` (N, 4, 4), ``targets`` (N, 4), ``image_dims`` (N, 2).
    """
    corners = corners_from_arrays(dims, locs, yaws, rolls, pitches)
    u, v, depth = project_arrays(corners, K[:, None], E[:, None])
    ok = np.all(depth > EPS_DEPTH, axis=-1)
    proj = np.stack([u.min(axis=-1), v.min(axis=-1), u.max(axis=-1), v.max(axis=-1)], axis=-1)
    tgt = np.asarray(targets, dtype=np.float64)
    size = np.asarray(image_dims, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        l_giou = (1.0 - giou_arrays(proj, tgt)) / 2.0
        l_center = center_l1_arrays(proj, tgt, (size[:, 0], size[:, 1]))
        per_pair = weights.lambda_giou_pc * l_giou + weights.lambda_center_pc * l_center
    return np.where(ok, per_pair, np.nan)


def projective_consistency_arrays(dims, locs, yaws, rolls, pitches, K, E, targets, image_dims, weights):
    """Array form of :func:`projective_consistency_loss` for one set of N pairs.

    Returns:
        ``(loss, n_skipped)``.
    """
    if len(dims) == 0:
        return 0.0, 0
    per_pair = projective_consistency_terms(dims, locs, yaws, rolls, pitches, K, E, targets, image_dims, weights)
    valid = ~np.isnan(per_pair)
    n_skipped = int(per_pair.size - valid.sum())
    if not valid.any():
        return 0.0, n_skipped
    return float(per_pair[valid].mean()), n_skipped


def projective_consistency_loss(preds_3d, targets_2d, plane, cam, weights=None, image_dims=None, return_skipped=False):
    """Mean projective consistency between predicted 3D boxes and their 2D targets.

    Each pair contributes ``lambda_giou_pc * (1 - GIoU) / 2 +
    lambda_center_pc * center_l1``, where the GIoU and center terms compare
    the projected box rectangle with the target.  Pairs with a corner behind
    the camera are skipped.

    Args:
        preds_3d: predicted boxes.
        targets_2d: index-aligned 2D targets.
        plane: ground plane supplying roll and pitch.
        cam: camera model.
        weights: :class:`LossWeights`; only the ``*_pc`` internals are used.
        image_dims: ``(width, height)`` used to normalize centers; defaults
            to the camera image size.
        return_skipped: also return the number of skipped pairs.
    """
    w = weights or LossWeights()
    check_same_length(preds_3d, targets_2d, "preds_3d", "targets_2d")
    n = len(preds_3d)
    if image_dims is None:
        image_dims = cam.image_size
    dims, locs, yaws = boxes_to_arrays(preds_3d)
    loss, skipped = projective_consistency_arrays(
        dims,
        locs,
        yaws,
        np.full(n, plane.roll),
        np.full(n, plane.pitch),
        np.broadcast_to(cam.intrinsics, (n, 3, 3)),
        np.broadcast_to(cam.extrinsics, (n, 4, 4)),
        np.array([t.as_array() for t in targets_2d]).reshape(n, 4),
        np.broadcast_to(np.asarray(image_dims, dtype=np.float64), (n, 2)),
        w,
    )
    if skipped:
        logger.info("projective consistency skipped %d pair(s) behind the camera", skipped)
    return (loss, skipped) if return_skipped else loss


def frame_coplanarity(centers):
    """Smallest normalized variance of a set of bottom centers.

    ``sigma_3^2 / (sigma_1^2 + sigma_2^2 + sigma_3^2)`` of the mean-centered
    (N, 3) matrix, or 0 when fewer than 4 points are given.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) < 4:
        return 0.0
    s = np.linalg.svd(centers - centers.mean(axis=0), compute_uv=False)
    energy = float(np.sum(s**2))
    if energy == 0.0:
        logger.info("degenerate frame: all %d bottom centers coincide", len(centers))
        return 0.0
    return float(s[-1] ** 2 / energy)


def coplanar_loss(frames):
    """Average over frames of the out-of-plane variance share of bottom centers.

    Frames with fewer than four boxes count toward the average with 0.

    Args:
        frames: list of per-frame lists of Box3D (or of (N, 3) center arrays).
    """
    if len(frames) == 0:
        return 0.0
    total = 0.0
    for frame in frames:
        if len(frame) and not isinstance(frame, np.ndarray) and hasattr(frame[0], "location"):
            centers = [b.location for b in frame]
        else:
            centers = frame
        total += frame_coplanarity(centers)
    return total / len(frames)


def overall_loss(l_2d, l_3d_per_object, mask_3d, l_dmap, l_pc, l_moc, weights=None):
    """Weighted sum of the five loss terms.

    The 3D term is the mean of ``l_3d_per_object`` over entries whose mask is
    True, or 0 when the mask is empty.
    """
    w = weights or LossWeights()
    check_same_length(l_3d_per_object, mask_3d, "l_3d_per_object", "mask_3d")
    l3 = np.asarray(l_3d_per_object, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask_3d, dtype=bool).reshape(-1)
    if l3.shape != mask.shape:
        raise InvalidArgumentError("l_3d_per_object and mask_3d must be flat sequences")
    mask_count = int(mask.sum())
    l_3d = float(l3[mask].mean()) if mask_count else 0.0
    total = (
        w.lambda_2d * float(l_2d)
        + w.lambda_3d * l_3d
        + w.lambda_dmap * float(l_dmap)
        + w.lambda_pc * float(l_pc)
        + w.lambda_moc * float(l_moc)
    )
    return LossReport(float(l_2d), l_3d, float(l_dmap), float(l_pc), float(l_moc), total, mask_count)
