"""Axis-aligned image rectangles and the overlap metrics built on them.

The scalar functions (``iou_2d``, ``giou_2d``, ``center_l1``) operate on
:class:`Box2D` instances.  The ``*_arrays`` variants take ``(N, 4)`` arrays in
``[x_min, y_min, x_max, y_max]`` layout and compute element-wise results; the
scalar functions are thin wrappers over them so both paths agree bit for bit.
"""

from dataclasses import dataclass, replace

import numpy as np

from ._validation import check_finite_scalar, check_positive, check_unit_interval
from .exceptions import InvalidArgumentError


@dataclass(frozen=True)
class Box2D:
    """Image-plane rectangle in pixels with a class label and confidence."""

    class_label: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, check_finite_scalar(getattr(self, name), name))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidArgumentError(
                "Box2D needs x_min < x_max and y_min < y_max, got "
                f"({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        object.__setattr__(self, "confidence", check_unit_interval(self.confidence, "confidence"))

    @classmethod
    def from_center(cls, class_label, cx, cy, width, height, confidence=1.0):
        width = check_positive(width, "width")
        height = check_positive(height, "height")
        return cls(
            class_label,
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
            confidence,
        )

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def area(self):
        return self.width * self.height

    def to_center(self):
        """Return ``(cx, cy, width, height)``."""
        cx, cy = self.center
        return cx, cy, self.width, self.height

    def as_array(self):
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def with_label(self, class_label):
        return replace(self, class_label=class_label)

    def clipped(self, width, height):
        """Clip to ``[0, width] x [0, height]``; raises if nothing is left."""
        return replace(
            self,
            x_min=min(max(self.x_min, 0.0), width),
            y_min=min(max(self.y_min, 0.0), height),
            x_max=min(max(self.x_max, 0.0), width),
            y_max=min(max(self.y_max, 0.0), height),
        )


def _as_rects(boxes):
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise InvalidArgumentError(f"rectangle arrays need a trailing dimension of 4, got {arr.shape}")
    return arr


def _intersection_union(a, b):
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter, area_a + area_b - inter


def iou_arrays(a, b):
    a, b = _as_rects(a), _as_rects(b)
    inter, union = _intersection_union(a, b)
    return inter / union


def giou_arrays(a, b):
    """Generalized IoU, broadcasting over leading dimensions."""
    a, b = _as_rects(a), _as_rects(b)
    inter, union = _intersection_union(a, b)
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclosing = cw * ch
    # the enclosing box contains the union; clamp rounding so giou <= iou holds exactly
    return inter / union - np.maximum(enclosing - union, 0.0) / enclosing


def center_l1_arrays(a, b, norm):
    a, b = _as_rects(a), _as_rects(b)
    width, height = norm
    dcx = np.abs((a[..., 0] + a[..., 2]) - (b[..., 0] + b[..., 2])) / 2.0
    dcy = np.abs((a[..., 1] + a[..., 3]) - (b[..., 1] + b[..., 3])) / 2.0
    return dcx / width + dcy / height


def iou_2d(a, b):
    """Intersection over union of two rectangles; 0 when they are disjoint."""
    return float(iou_arrays(a.as_array(), b.as_array()))


def giou_2d(a, b):
    """Generalized IoU in (-1, 1].

    IoU minus the fraction of the smallest enclosing rectangle that the union
    does not cover.
    """
    return float(giou_arrays(a.as_array(), b.as_array()))


def center_l1(a, b, norm):
    """L1 distance between box centers, each axis divided by the image size.

    Args:
        a, b: the two rectangles.
        norm: ``(width, height)`` in pixels used to normalize x and y.
    """
    width, height = norm
    check_positive(width, "norm width")
    check_positive(height, "norm height")
    return float(center_l1_arrays(a.as_array(), b.as_array(), (float(width), float(height))))
