"""Confidence-aware bipartite matching between projected 3D and 2D detections.

Teacher 3D boxes are projected into the image, scored against every 2D
detection with a cost blending class agreement, GIoU and confidences, and
assigned one-to-one with the Hungarian algorithm.  Assigned pairs whose cost
exceeds a threshold are rejected after the global assignment is solved.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_cost_matrix, check_finite_scalar, check_non_negative
from .boxes2d import Box2D, giou_arrays
from .exceptions import BehindCameraError, InvalidArgumentError
from .geometry import Box3D, projected_aabb

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 2.2


@dataclass(frozen=True)
class MatchWeights:
    lambda_class: float = 1.0
    lambda_giou: float = 1.0
    lambda_conf: float = 1.0
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        for name in ("lambda_class", "lambda_giou", "lambda_conf"):
            object.__setattr__(self, name, check_non_negative(getattr(self, name), name))
        tau = check_finite_scalar(self.threshold, "threshold")
        if not 0.0 <= tau <= 3.0:
            raise InvalidArgumentError(f"threshold must lie in [0, 3], got {tau}")
        object.__setattr__(self, "threshold", tau)


class MatchedPair(NamedTuple):
    box3d: Box3D
    box2d: Box2D
    cost: float
    index_3d: int
    index_2d: int


@dataclass
class PseudoLabelSet:
    """Output of :func:`cabm` for one frame.

    ``matched_3d`` holds pairs carrying full 3D supervision; ``kept_2d`` the
    2D detections that were never accepted; ``discarded_3d`` the teacher boxes
    that were rejected, unmatched or behind the camera.
    """

    matched_3d: list = field(default_factory=list)
    kept_2d: list = field(default_factory=list)
    discarded_3d: list = field(default_factory=list)
    cost_matrix: np.ndarray = field(default=None, repr=False)

    @property
    def mask_3d(self):
        """Boolean mask over ``matched_3d + kept_2d``: True where 3D labels exist."""
        return [True] * len(self.matched_3d) + [False] * len(self.kept_2d)

    def counts(self):
        return {
            "matched": len(self.matched_3d),
            "kept_2d": len(self.kept_2d),
            "discarded_3d": len(self.discarded_3d),
        }


def _cost_components(proj, dets, proj_labels, det_labels, proj_conf, det_conf):
    """Broadcast the three normalized cost terms over (N, M)."""
    l_class = (np.asarray(proj_labels, dtype=object)[:, None] != np.asarray(det_labels, dtype=object)[None, :]).astype(
        np.float64
    )
    giou = giou_arrays(proj[:, None, :], dets[None, :, :])
    l_giou = (1.0 - giou) / 2.0
    l_conf = 1.0 - np.asarray(proj_conf)[:, None] * np.asarray(det_conf)[None, :]
    return l_class, l_giou, l_conf


def match_cost(projected, det2d, weights=None):
    """Matching cost between one projected 3D box and one 2D detection.

    ``lambda_class * [labels differ] + lambda_giou * (1 - GIoU) / 2
    + lambda_conf * (1 - conf_3d * conf_2d)``.  Each term lies in [0, 1].
    """
    w = weights or MatchWeights()
    l_class, l_giou, l_conf = _cost_components(
        projected.as_array()[None],
        det2d.as_array()[None],
        [projected.class_label],
        [det2d.class_label],
        [projected.confidence],
        [det2d.confidence],
    )
    return float(w.lambda_class * l_class[0, 0] + w.lambda_giou * l_giou[0, 0] + w.lambda_conf * l_conf[0, 0])


def cost_matrix(projected, dets, weights=None):
    """Full (N, M) cost matrix for lists of projected boxes and detections."""
    w = weights or MatchWeights()
    if not projected or not dets:
        return np.zeros((len(projected), len(dets)))
    l_class, l_giou, l_conf = _cost_components(
        np.array([b.as_array() for b in projected]),
        np.array([d.as_array() for d in dets]),
        [b.class_label for b in projected],
        [d.class_label for d in dets],
        [b.confidence for b in projected],
        [d.confidence for d in dets],
    )
    return w.lambda_class * l_class + w.lambda_giou * l_giou + w.lambda_conf * l_conf


def _solve_square(cost):
    """Shortest augmenting path with dual potentials; O(n^3).

    Returns ``col_of_row`` for a square matrix.
    """
    n = cost.shape[0]
    # 1-based arrays; index 0 is the virtual source column
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[1:]
            cols = np.flatnonzero(free) + 1
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = np.argmin(minv[cols])
            j1 = cols[k]
            delta = minv[j1]
            used_cols = np.flatnonzero(used)
            u[row_of_col[used_cols]] += delta
            v[used_cols] -= delta
            minv[cols] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while True:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[row_of_col[j] - 1] = j - 1
    return col_of_row


def hungarian(cost):
    """Minimum-cost one-to-one assignment.

    Rectangular inputs are padded to square with a constant sentinel larger
    than every real entry; assignments to padding are dropped.

    Args:
        cost: (N, M) array-like of finite costs.

    Returns:
        Sorted list of ``(row, col)`` pairs, ``min(N, M)`` of them.
    """
    c = check_cost_matrix(cost)
    n_rows, n_cols = c.shape
    if n_rows == 0 or n_cols == 0:
        return []
    n = max(n_rows, n_cols)
    if n_rows != n_cols:
        sentinel = float(np.abs(c).max()) * 2.0 + 1.0
        padded = np.full((n, n), sentinel)
        padded[:n_rows, :n_cols] = c
    else:
        padded = c
    col_of_row = _solve_square(padded)
    return [(r, int(col_of_row[r])) for r in range(n_rows) if col_of_row[r] < n_cols]


def assignment_cost(cost, pairs):
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[r, k] for r, k in pairs))


def cabm(teacher_3d, dets_2d, plane, cam, weights=None):
    """Fuse teacher 3D boxes with 2D detections into a pseudo-label set.

    Teacher boxes with any corner behind the camera go straight to
    ``discarded_3d``.  Accepted pairs keep the teacher's pose and size but
    take their class label from the 2D detection.
    """
    w = weights or MatchWeights()
    result = PseudoLabelSet()
    valid_idx, projected = [], []
    for i, box in enumerate(teacher_3d):
        try:
            projected.append(projected_aabb(box, plane, cam))
            valid_idx.append(i)
        except BehindCameraError:
            result.discarded_3d.append(box)

    cost = cost_matrix(projected, list(dets_2d), w)
    result.cost_matrix = cost
    accepted_rows, accepted_cols = set(), set()
    for r, c in hungarian(cost):
        if cost[r, c] <= w.threshold:
            i = valid_idx[r]
            det = dets_2d[c]
            result.matched_3d.append(
                MatchedPair(teacher_3d[i].replace(class_label=det.class_label), det, float(cost[r, c]), i, c)
            )
            accepted_rows.add(r)
            accepted_cols.add(c)
    result.matched_3d.sort(key=lambda p: p.index_3d)
    result.kept_2d = [d for j, d in enumerate(dets_2d) if j not in accepted_cols]
    result.discarded_3d.extend(teacher_3d[valid_idx[r]] for r in range(len(valid_idx)) if r not in accepted_rows)
    logger.debug("cabm: %s", result.counts())
    return result


class BipartiteMatcher(BaseEstimator):
    """Estimator-style front end for :func:`cabm`.

    Hyperparameters follow :class:`MatchWeights`, so the matcher works with
    ``get_params``/``set_params``/``clone``.  ``transform`` maps a list of
    frames ``(teacher_3d, dets_2d, plane, cam)`` to pseudo-label sets.
    """

    def __init__(self, lambda_class=1.0, lambda_giou=1.0, lambda_conf=1.0, threshold=DEFAULT_THRESHOLD):
        self.lambda_class = lambda_class
        self.lambda_giou = lambda_giou
        self.lambda_conf = lambda_conf
        self.threshold = threshold

    @property
    def weights(self):
        return MatchWeights(self.lambda_class, self.lambda_giou, self.lambda_conf, self.threshold)

    def fit(self, X=None, y=None):
        # stateless; validates hyperparameters
        self.weights_ = self.weights
        return self

    def match(self, teacher_3d, dets_2d, plane, cam):
        return cabm(teacher_3d, dets_2d, plane, cam, self.weights)

    def transform(self, frames):
        w = self.weights
        return [cabm(t, d, p, c, w) for t, d, p, c in frames]

    def fit_transform(self, frames, y=None):
        return self.fit().transform(frames)
