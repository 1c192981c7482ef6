"""Pinhole camera geometry: projection, back-projection and ray triangulation.

All world coordinates are millimeters.  Calibration files may declare other
units; the loader rescales the projection matrix so everything downstream
works in mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateConfiguration, DegenerateProjection

# mm per declared calibration unit
_UNIT_TO_MM = {"mm": 1.0, "cm": 10.0, "m": 1000.0}

# homogeneous scale below this is treated as a projective singularity
W_EPSILON = 1e-12

# condition number above this means the triangulation normal matrix is degenerate
CONDITION_LIMIT = 1e10


def as_point3(p) -> np.ndarray:
    """Validate and convert a 3D point to a float64 array of shape (3,)."""
    a = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"point has non-finite components: {a}")
    return a


@dataclass(frozen=True)
class CameraCalibration:
    """A calibrated pinhole camera: 3x4 projection (world mm -> homogeneous px).

    The left 3x3 block must be invertible so the camera center and viewing
    direction are well defined.
    """

    camera_id: str
    projection: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        P = np.array(self.projection, dtype=np.float64).reshape(3, 4)
        if np.linalg.matrix_rank(P) != 3:
            raise ValueError(f"camera {self.camera_id}: projection must have rank 3")
        M = P[:, :3]
        det = float(np.linalg.det(M))
        if abs(det) < 1e-12:
            raise ValueError(
                f"camera {self.camera_id}: left 3x3 block is singular, camera center undefined"
            )
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError(f"camera {self.camera_id}: image dimensions must be positive")
        P.setflags(write=False)
        m_inv = np.linalg.inv(M)
        m_inv.setflags(write=False)
        center = -m_inv @ P[:, 3]
        center.setflags(write=False)
        object.__setattr__(self, "projection", P)
        object.__setattr__(self, "_m_inv", m_inv)
        object.__setattr__(self, "_center", center)
        object.__setattr__(self, "_det_sign", 1.0 if det > 0 else -1.0)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (mm)."""
        return self._center


@dataclass(frozen=True)
class PixelProjection:
    """Result of projecting a world point: pixel coordinates plus validity flags."""

    x: float
    y: float
    in_front: bool
    in_image: bool

    @property
    def valid(self) -> bool:
        return self.in_front and self.in_image

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Ray:
    """A world-space ray: origin plus unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = as_point3(self.origin)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got |d|={np.linalg.norm(d)}")
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @staticmethod
    def through(origin, direction) -> "Ray":
        """Build a ray, normalizing the direction vector."""
        d = np.asarray(direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-15:
            raise ValueError("ray direction must be nonzero")
        return Ray(origin=as_point3(origin), direction=d / n)

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def project(cal: CameraCalibration, p) -> PixelProjection:
    """Project a world point (mm) into pixel coordinates.

    Points behind the camera or outside [0,w)x[0,h) are flagged, not errors:
    downstream heat-map lookups treat them as out-of-image.

    Raises DegenerateProjection when the homogeneous scale vanishes (the point
    coincides with the camera center).
    """
    p = as_point3(p)
    h = cal.projection @ np.append(p, 1.0)
    w = h[2]
    if abs(w) < W_EPSILON:
        raise DegenerateProjection(
            f"camera {cal.camera_id}: point {p} projects with |w| < {W_EPSILON}"
        )
    x, y = h[0] / w, h[1] / w
    in_front = (w * cal._det_sign) > 0
    in_image = (0.0 <= x < cal.image_width) and (0.0 <= y < cal.image_height)
    return PixelProjection(float(x), float(y), bool(in_front), bool(in_image))


def project_many(cal: CameraCalibration, points: np.ndarray):
    """Vectorized projection of an (n, 3) point array.

    Returns (pixels (n, 2), in_front (n,), in_image (n,)).  Degenerate points
    (|w| < W_EPSILON) are marked not-in-front and not-in-image instead of
    raising, so batched factor evaluation can floor them.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    h = pts @ cal.projection[:, :3].T + cal.projection[:, 3]
    w = h[:, 2]
    ok = np.abs(w) >= W_EPSILON
    safe_w = np.where(ok, w, 1.0)
    pix = h[:, :2] / safe_w[:, None]
    in_front = ok & ((w * cal._det_sign) > 0)
    in_image = (
        ok
        & (pix[:, 0] >= 0.0)
        & (pix[:, 0] < cal.image_width)
        & (pix[:, 1] >= 0.0)
        & (pix[:, 1] < cal.image_height)
    )
    return pix, in_front, in_image


def backproject(cal: CameraCalibration, px) -> Ray:
    """Back-project a pixel coordinate into a world ray from the camera center.

    The direction is oriented so points in front of the camera lie at t > 0.
    """
    px = np.asarray(px, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(px)):
        raise ValueError(f"pixel coordinate must be finite, got {px}")
    d = cal._m_inv @ np.array([px[0], px[1], 1.0])
    d = d * cal._det_sign
    return Ray.through(cal._center, d)


def backproject_many(cal: CameraCalibration, pix: np.ndarray):
    """Vectorized back-projection: (n, 2) pixels -> (origins (n, 3), dirs (n, 3))."""
    px = np.asarray(pix, dtype=np.float64).reshape(-1, 2)
    ones = np.ones((px.shape[0], 1))
    d = np.hstack([px, ones]) @ cal._m_inv.T * cal._det_sign
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(cal._center, d.shape)
    return origins, d


def triangulate(rays: Sequence[Ray]) -> tuple[np.ndarray, float]:
    """Least-squares closest point to two or more rays.

    Minimizes the sum of squared perpendicular distances via the 3x3 normal
    equations sum_i (I - d_i d_i^T).  Returns (point, residual) where the
    residual is the RMS perpendicular distance in mm.

    Raises DegenerateConfiguration when the normal matrix condition number
    exceeds CONDITION_LIMIT (near-parallel rays).
    """
    if len(rays) < 2:
        raise ValueError("triangulation needs at least 2 rays")
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    return triangulate_arrays(origins, dirs)


def triangulate_arrays(origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, float]:
    """triangulate() on raw (n, 3) origin/unit-direction arrays."""
    n = origins.shape[0]
    eye = np.eye(3)
    proj = eye[None, :, :] - dirs[:, :, None] * dirs[:, None, :]  # (n, 3, 3)
    A = proj.sum(axis=0)
    b = np.einsum("nij,nj->i", proj, origins)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise DegenerateConfiguration(
            f"normal matrix condition {cond:.3e} exceeds {CONDITION_LIMIT:.0e}"
        )
    x = np.linalg.solve(A, b)
    diff = x[None, :] - origins
    perp = diff - (np.einsum("ni,ni->n", diff, dirs))[:, None] * dirs
    residual = float(np.sqrt((perp ** 2).sum(axis=1).mean()))
    return x, residual


def pairwise_ray_distance(r1: Ray, r2: Ray) -> float:
    """Distance between the closest points of two rays (treated as lines).

    For parallel rays this is the perpendicular distance between the lines.
    """
    cross = np.cross(r1.direction, r2.direction)
    diff = r2.origin - r1.origin
    denom = np.linalg.norm(cross)
    if denom < 1e-12:
        # parallel: distance from r2.origin to the line of r1
        perp = diff - (diff @ r1.direction) * r1.direction
        return float(np.linalg.norm(perp))
    return float(abs(diff @ cross) / denom)


def closest_points(r1: Ray, r2: Ray) -> tuple[np.ndarray, np.ndarray]:
    """Closest points on two skew lines (undefined for parallel lines)."""
    d1, d2 = r1.direction, r2.direction
    diff = r2.origin - r1.origin
    a = d1 @ d2
    denom = 1.0 - a * a
    if abs(denom) < 1e-12:
        raise DegenerateConfiguration("closest points undefined for parallel rays")
    t1 = (diff @ d1 - a * (diff @ d2)) / denom
    t2 = (a * (diff @ d1) - diff @ d2) / denom
    return r1.point_at(t1), r2.point_at(t2)


def load_calibrations(path) -> dict[str, CameraCalibration]:
    """Load a calibration file: JSON array of cameras.

    Each entry: {"camera_id", "P": 12 row-major reals, "width", "height",
    "units": "mm"|"cm"|"m"}.  The projection is rescaled so world coordinates
    are millimeters internally.
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read calibration file {path}: {e}") from e
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"calibration file {path} must hold a non-empty JSON array")
    cams: dict[str, CameraCalibration] = {}
    for e in entries:
        try:
            units = e.get("units", "mm")
            if units not in _UNIT_TO_MM:
                raise ConfigError(f"unknown units {units!r} in {path}")
            k = _UNIT_TO_MM[units]
            P = np.array(e["P"], dtype=np.float64).reshape(3, 4)
            P = P.copy()
            P[:, :3] /= k  # world mm instead of declared units
            cam = CameraCalibration(
                camera_id=str(e["camera_id"]),
                projection=P,
                image_width=int(e["width"]),
                image_height=int(e["height"]),
            )
        except (KeyError, ValueError) as err:
            raise ConfigError(f"bad calibration entry in {path}: {err}") from err
        if cam.camera_id in cams:
            raise ConfigError(f"duplicate camera_id {cam.camera_id!r} in {path}")
        cams[cam.camera_id] = cam
    return cams


def save_calibrations(path, cams: Iterable[CameraCalibration]) -> None:
    """Write calibrations in the JSON format accepted by load_calibrations (mm units)."""
    entries = [
        {
            "camera_id": c.camera_id,
            "P": [float(v) for v in np.asarray(c.projection).ravel()],
            "width": c.image_width,
            "height": c.image_height,
            "units": "mm",
        }
        for c in cams
    ]
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True))
