"""3D box geometry: corners, rotations, pinhole projection and ground planes.

Conventions
-----------
World frame is right-handed with z pointing up.  A box's ``location`` is its
*bottom* center.  In the object frame x runs along the length, y along the
width and z up, so corners sit at ``(+-l/2, +-w/2, {0, h})``.  The box is
rotated by ``rotation_matrix(roll, pitch, yaw)`` where roll and pitch come
from the frame's ground plane and yaw from the box itself.

Camera frame follows the usual pinhole convention (x right, y down, z
forward).  The extrinsic matrix maps world coordinates to camera coordinates.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import (
    check_finite_scalar,
    check_points,
    check_positive,
    check_unit_interval,
    wrap_angle,
)
from .boxes2d import Box2D
from .exceptions import BehindCameraError, CalibrationError, DegenerateGeometryError, InvalidArgumentError

EPS_DEPTH = 1e-6
"""Minimum camera-frame depth, in meters, accepted by the projection."""

# bottom face counter-clockwise seen from above, then the top face in the same order
_CORNER_SIGNS = np.array(
    [
        [1, 1, 0],
        [-1, 1, 0],
        [-1, -1, 0],
        [1, -1, 0],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box resting on its bottom center.

    Attributes:
        class_label: evaluation category name, e.g. ``"Car"``.
        length, width, height: extents in meters along object x, y, z.
        location: world-frame bottom-center ``(x, y, z)`` in meters.
        yaw: heading in radians, normalized to [-pi, pi).
        confidence: score in [0, 1]; ground truth uses 1.0.
    """

    class_label: str
    length: float
    width: float
    height: float
    location: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    confidence: float = 1.0

    def __post_init__(self):
        for name in ("length", "width", "height"):
            object.__setattr__(self, name, check_positive(getattr(self, name), name))
        loc = tuple(check_finite_scalar(v, "location") for v in np.asarray(self.location, dtype=np.float64).ravel())
        if len(loc) != 3:
            raise InvalidArgumentError(f"location must have 3 components, got {len(loc)}")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "yaw", wrap_angle(check_finite_scalar(self.yaw, "yaw")))
        object.__setattr__(self, "confidence", check_unit_interval(self.confidence, "confidence"))

    @property
    def dimensions(self):
        """``(length, width, height)``."""
        return (self.length, self.width, self.height)

    @property
    def volume(self):
        return self.length * self.width * self.height

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with intrinsics ``K`` and world-to-camera extrinsics ``E``."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_width: int = 1920
    image_height: int = 1080
    tolerance: float = field(default=1e-6, repr=False, compare=False)

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=np.float64)
        E = np.array(self.extrinsics, dtype=np.float64)
        if K.shape != (3, 3):
            raise CalibrationError(f"intrinsics must be 3x3, got {K.shape}")
        if E.shape != (4, 4):
            raise CalibrationError(f"extrinsics must be 4x4, got {E.shape}")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(E))):
            raise CalibrationError("camera matrices must be finite")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CalibrationError("focal lengths fx, fy must be positive")
        if K[0, 1] != 0 or K[1, 0] != 0 or not np.array_equal(K[2], [0.0, 0.0, 1.0]):
            raise CalibrationError("intrinsics must have zero skew and bottom row (0, 0, 1)")
        if not np.array_equal(E[3], [0.0, 0.0, 0.0, 1.0]):
            raise CalibrationError("extrinsics bottom row must be (0, 0, 0, 1)")
        R = E[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), rtol=0.0, atol=self.tolerance):
            raise CalibrationError("extrinsic rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > self.tolerance:
            raise CalibrationError(f"extrinsic rotation determinant is {np.linalg.det(R):.6g}, expected +1")
        if int(self.image_width) <= 0 or int(self.image_height) <= 0:
            raise CalibrationError("image dimensions must be positive")
        K.setflags(write=False)
        E.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", E)
        object.__setattr__(self, "image_width", int(self.image_width))
        object.__setattr__(self, "image_height", int(self.image_height))

    @classmethod
    def from_parameters(cls, fx, fy, cx, cy, rotation=None, translation=None, image_width=1920, image_height=1080):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        E = np.eye(4)
        if rotation is not None:
            E[:3, :3] = rotation
        if translation is not None:
            E[:3, 3] = translation
        return cls(K, E, image_width, image_height)

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]

    @property
    def rotation(self):
        return self.extrinsics[:3, :3]

    @property
    def translation(self):
        return self.extrinsics[:3, 3]

    @property
    def image_size(self):
        return (self.image_width, self.image_height)

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation


@dataclass(frozen=True)
class GroundPlane:
    """Plane ``normal . p = offset`` with the tilt angles that produce it.

    ``rotation_matrix(roll, pitch, 0)`` maps world up ``(0, 0, 1)`` onto
    ``normal``.  Use :meth:`from_angles` or :meth:`from_normal` rather than
    filling the fields by hand.
    """

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).ravel()
        if n.shape != (3,) or not np.all(np.isfinite(n)):
            raise InvalidArgumentError("plane normal must be a finite 3-vector")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise InvalidArgumentError(f"plane normal must be unit length, got norm {np.linalg.norm(n)}")
        if n[2] <= 0:
            raise InvalidArgumentError("plane normal must point upward (positive z component)")
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "offset", check_finite_scalar(self.offset, "offset"))
        object.__setattr__(self, "pitch", check_finite_scalar(self.pitch, "pitch"))
        object.__setattr__(self, "roll", check_finite_scalar(self.roll, "roll"))
        expected = rotation_matrix(self.roll, self.pitch, 0.0)[:, 2]
        if not np.allclose(expected, n, rtol=0.0, atol=1e-6):
            raise InvalidArgumentError("plane pitch/roll are inconsistent with its normal")

    @classmethod
    def flat(cls, offset=0.0):
        return cls((0.0, 0.0, 1.0), offset, 0.0, 0.0)

    @classmethod
    def from_angles(cls, pitch, roll, offset=0.0):
        n = rotation_matrix(roll, pitch, 0.0)[:, 2]
        return cls(tuple(n / np.linalg.norm(n)), offset, float(pitch), float(roll))

    @classmethod
    def from_normal(cls, normal, offset=0.0):
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        if n[2] < 0:
            n, offset = -n, -offset
        pitch, roll = _angles_from_normal(n)
        return cls(tuple(n), offset, pitch, roll)

    def height_at(self, x, y):
        """z coordinate of the plane above ``(x, y)``."""
        nx, ny, nz = self.normal
        return (self.offset - nx * x - ny * y) / nz

    def signed_distance(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ np.asarray(self.normal) - self.offset


def _angles_from_normal(n):
    # R_x(roll) R_y(pitch) e_z = (sin p, -sin r cos p, cos r cos p)
    pitch = float(np.arcsin(np.clip(n[0], -1.0, 1.0)))
    roll = float(np.arctan2(-n[1], n[2]))
    return pitch, roll


def _rotation_matrices(roll, pitch, yaw):
    """Stack of ``R_x(roll) @ R_y(pitch) @ R_z(yaw)`` for broadcastable angle arrays."""
    roll, pitch, yaw = np.broadcast_arrays(
        np.asarray(roll, dtype=np.float64),
        np.asarray(pitch, dtype=np.float64),
        np.asarray(yaw, dtype=np.float64),
    )
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.empty(roll.shape + (3, 3))
    # expanded product of the three elementary rotations
    R[..., 0, 0] = cp * cy
    R[..., 0, 1] = -cp * sy
    R[..., 0, 2] = sp
    R[..., 1, 0] = sr * sp * cy + cr * sy
    R[..., 1, 1] = -sr * sp * sy + cr * cy
    R[..., 1, 2] = -sr * cp
    R[..., 2, 0] = -cr * sp * cy + sr * sy
    R[..., 2, 1] = cr * sp * sy + sr * cy
    R[..., 2, 2] = cr * cp
    return R


def rotation_matrix(roll, pitch, yaw):
    """Compose ``R_x(roll) @ R_y(pitch) @ R_z(yaw)``.

    Args:
        roll: rotation about x, radians.
        pitch: rotation about y, radians.
        yaw: rotation about z, radians.

    Returns:
        A 3x3 rotation matrix.
    """
    angles = [check_finite_scalar(a, n) for a, n in ((roll, "roll"), (pitch, "pitch"), (yaw, "yaw"))]
    return _rotation_matrices(*angles)


def corners_from_arrays(dims, locations, yaws, rolls, pitches):
    """Vectorized corner generation.

    Args:
        dims: (..., 3) array of (length, width, height).
        locations: (..., 3) bottom centers.
        yaws, rolls, pitches: (...) angles, radians.

    All leading dimensions broadcast together.

    Returns:
        (..., 8, 3) world-frame corners in the documented order.
    """
    dims = np.asarray(dims, dtype=np.float64)
    half = dims * np.array([0.5, 0.5, 1.0])
    local = _CORNER_SIGNS * half[..., None, :]
    R = _rotation_matrices(rolls, pitches, yaws)
    return np.matmul(local, np.swapaxes(R, -1, -2)) + np.asarray(locations, dtype=np.float64)[..., None, :]


def box_corners_world(box, plane=None):
    """World-frame corners of ``box`` tilted onto ``plane``.

    The order is the bottom face counter-clockwise viewed from above starting
    at ``(+l/2, +w/2, 0)``, then the top face in the same order.

    Returns:
        (8, 3) array.
    """
    plane = plane or GroundPlane.flat()
    return corners_from_arrays(
        np.array([box.dimensions]),
        np.array([box.location]),
        np.array([box.yaw]),
        np.array([plane.roll]),
        np.array([plane.pitch]),
    )[0]


def project_arrays(points, K, E):
    """Project ``(..., 3)`` world points with per-point or shared camera matrices.

    ``K`` and ``E`` broadcast against the leading dimensions of ``points``.
    Returns ``(u, v, depth)`` arrays without any depth check.
    """
    points = np.asarray(points, dtype=np.float64)
    R = E[..., :3, :3]
    t = E[..., :3, 3]
    cam = np.matmul(points[..., None, :], np.swapaxes(R, -1, -2))[..., 0, :] + t
    depth = cam[..., 2]
    u = K[..., 0, 0] * cam[..., 0] / depth + K[..., 0, 2]
    v = K[..., 1, 1] * cam[..., 1] / depth + K[..., 1, 2]
    return u, v, depth


def project_points(points, cam):
    """Map world points to pixels.

    Returns:
        (N, 3) array of ``(u, v, depth)``.

    Raises:
        BehindCameraError: if any point has depth <= ``EPS_DEPTH``; the error
            carries the offending index.
    """
    pts = check_points(points)
    u, v, depth = project_arrays(pts, cam.intrinsics, cam.extrinsics)
    bad = np.flatnonzero(depth <= EPS_DEPTH)
    if bad.size:
        raise BehindCameraError(bad[0], depth[bad[0]])
    return np.stack([u, v, depth], axis=1)


def unproject_points(pixels, cam):
    """Inverse of :func:`project_points` given ``(u, v, depth)`` rows."""
    pixels = np.asarray(pixels, dtype=np.float64)
    u, v, depth = pixels[:, 0], pixels[:, 1], pixels[:, 2]
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    return cam.camera_to_world(np.stack([x, y, depth], axis=1))


def projected_aabb(box, plane, cam):
    """Image rectangle spanned by the 8 projected corners of ``box``.

    The rectangle is not clipped to the image and inherits the box's class
    and confidence.
    """
    corners = box_corners_world(box, plane)
    uvd = project_points(corners, cam)
    return Box2D(
        box.class_label,
        float(uvd[:, 0].min()),
        float(uvd[:, 1].min()),
        float(uvd[:, 0].max()),
        float(uvd[:, 1].max()),
        box.confidence,
    )


def fit_ground_plane(points, rank_tol=1e-12):
    """Least-squares plane through ``points`` via SVD of the centered cloud.

    The normal is the right singular vector of the smallest singular value,
    flipped to point up.  Raises :class:`DegenerateGeometryError` for
    collinear or coincident points and for vertical planes.
    """
    pts = check_points(points, min_points=3)
    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    if s[0] == 0.0 or s[1] <= rank_tol * s[0]:
        raise DegenerateGeometryError("points are collinear or coincident; plane is undefined")
    normal = vt[2]
    if normal[2] < 0:
        normal = -normal
    if normal[2] <= 0:
        raise DegenerateGeometryError("fitted plane is vertical and cannot serve as a ground plane")
    normal = normal / np.linalg.norm(normal)
    return GroundPlane.from_normal(normal, float(normal @ centroid))


class GroundPlaneFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_ground_plane`.

    ``fit`` takes an (N, 3) array of world points; ``predict`` returns the
    signed distance of new points to the fitted plane and ``transform`` the
    plane height residual ``z - z_plane(x, y)``.
    """

    def __init__(self, rank_tol=1e-12):
        self.rank_tol = rank_tol

    def fit(self, X, y=None):
        self.plane_ = fit_ground_plane(X, rank_tol=self.rank_tol)
        self.normal_ = np.asarray(self.plane_.normal)
        self.offset_ = self.plane_.offset
        self.pitch_ = self.plane_.pitch
        self.roll_ = self.plane_.roll
        return self

    def _check_fitted(self):
        if not hasattr(self, "plane_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("GroundPlaneFitter is not fitted yet; call fit first")

    def predict(self, X):
        self._check_fitted()
        return self.plane_.signed_distance(check_points(X, name="X"))

    def transform(self, X):
        self._check_fitted()
        pts = check_points(X, name="X")
        return pts[:, 2] - self.plane_.height_at(pts[:, 0], pts[:, 1])

    def score(self, X, y=None):
        """Negative RMS distance of ``X`` to the plane (higher is better)."""
        d = self.predict(X)
        return -float(np.sqrt(np.mean(d ** 2)))
