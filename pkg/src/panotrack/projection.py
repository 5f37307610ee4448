"""Sphere/plane geometry between equirectangular panoramas and perspective views.

Conventions used throughout the package:

* Camera frame of a view: X to the right, Y up, Z along the optical axis.
* Geographic: ``lon`` in [-180, 180) grows to the right on the panorama,
  ``lat`` in [-90, 90] is positive above the horizon.
* Panorama pixels: ``x = (lon / 360 + 0.5) * width``,
  ``y = (0.5 - lat / 180) * height`` (continuous, pixel ``i`` covers [i, i+1)).
* Sub-view pixels map onto the tangent plane as ``u = 2T * sx / out_width``,
  ``v = 2T * sy / out_height`` with ``T = tan(fov / 2)``, so the pixel with
  index ``px`` has its centre at ``sx = px + 0.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def normalize_lon(lon):
    """Wrap longitude(s) into [-180, 180)."""
    return (np.asarray(lon, dtype=float) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class ViewSpec:
    fov: float
    theta_c: float  # view longitude, degrees
    phi_c: float  # view latitude, degrees
    out_width: int
    out_height: int

    def __post_init__(self):
        if not (0.0 < self.fov < 180.0):
            raise ValueError(f"fov must lie in (0, 180), got {self.fov}")
        if not (-90.0 <= self.phi_c <= 90.0):
            raise ValueError(f"phi_c must lie in [-90, 90], got {self.phi_c}")
        if self.out_width < 2 or self.out_height < 2:
            raise ValueError("sub-view raster must be at least 2x2")

    @property
    def T(self):
        return math.tan(math.radians(self.fov) / 2.0)


@dataclass(frozen=True)
class PanoramaGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 4 or self.height < 2:
            raise ValueError(f"panorama too small: {self.width}x{self.height}")


@dataclass(frozen=True)
class ProjectionMaps:
    """Source panorama coordinates for every output pixel, shape (out_h, out_w)."""

    lon_map: np.ndarray
    lat_map: np.ndarray
    pano: PanoramaGeometry


def plane_to_sphere(u, v, T):
    """Tangent-plane point(s) to unit vector(s); returns shape (..., 3)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if not (np.isfinite(T) and T > 0):
        raise ValueError(f"T must be a positive finite number, got {T}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("plane coordinates must be finite")
    d = np.sqrt(u * u + v * v + 2 * T * T - 2 * u * T - 2 * v * T + 1.0)
    return np.stack([(u - T) / d, (-v + T) / d, 1.0 / d], axis=-1)


def sphere_to_geographic(vec):
    """Unit vector(s) (..., 3) -> (lon, lat) in degrees."""
    vec = np.asarray(vec, dtype=float)
    norm = np.linalg.norm(vec, axis=-1)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("cannot convert a zero or non-finite vector to lon/lat")
    x, y, z = (vec[..., i] / norm for i in range(3))
    lat = np.degrees(np.arcsin(np.clip(y, -1.0, 1.0)))
    lon = normalize_lon(np.degrees(np.arctan2(-z, x)))
    return lon, lat


def geographic_to_sphere(lon, lat):
    lon = np.radians(np.asarray(lon, dtype=float))
    lat = np.radians(np.asarray(lat, dtype=float))
    if np.any(np.abs(lat) > np.pi / 2 + 1e-12):
        raise ValueError("latitude outside [-90, 90]")
    c = np.cos(lat)
    return np.stack([c * np.cos(lon), np.sin(lat), -c * np.sin(lon)], axis=-1)


def rotation_matrix(view):
    """Rotation taking camera-frame rays of ``view`` to the world frame.

    ``alpha`` is the azimuth term (view longitude + 90 deg) and ``beta`` the
    elevation term; the optical axis (0, 0, 1) lands on
    (lon, lat) = (theta_c, phi_c).
    """
    a = math.radians(view.theta_c) + math.pi / 2
    b = math.radians(view.phi_c)
    ca, sa, cb, sb = math.cos(a), math.sin(a), math.cos(b), math.sin(b)
    return np.array(
        [
            [ca, -sa * sb, sa * cb],
            [0.0, cb, sb],
            [-sa, -sb * ca, ca * cb],
        ]
    )


def rotate_to_view(vec, view):
    return np.asarray(vec, dtype=float) @ rotation_matrix(view).T


def lon_to_x(lon, width):
    return (np.asarray(lon, dtype=float) / 360.0 + 0.5) * width


def lat_to_y(lat, height):
    return (0.5 - np.asarray(lat, dtype=float) / 180.0) * height


def x_to_lon(x, width):
    return (np.asarray(x, dtype=float) / width - 0.5) * 360.0


def y_to_lat(y, height):
    return (0.5 - np.asarray(y, dtype=float) / height) * 180.0


def _subview_to_world(sx, sy, view):
    T = view.T
    u = 2 * T * np.asarray(sx, dtype=float) / view.out_width
    v = 2 * T * np.asarray(sy, dtype=float) / view.out_height
    return rotate_to_view(plane_to_sphere(u, v, T), view)


def subview_to_geographic(sx, sy, view):
    """Continuous sub-view coordinates to (lon, lat) without bounds checks."""
    return sphere_to_geographic(_subview_to_world(sx, sy, view))


def build_projection_maps(view, pano):
    """Panorama source coordinates for the centre of every sub-view pixel."""
    sx = np.arange(view.out_width) + 0.5
    sy = np.arange(view.out_height) + 0.5
    gx, gy = np.meshgrid(sx, sy)
    lon, lat = subview_to_geographic(gx, gy, view)
    lon_map = lon_to_x(lon, pano.width) % pano.width
    lat_map = lat_to_y(lat, pano.height)
    return ProjectionMaps(lon_map=lon_map, lat_map=lat_map, pano=pano)


def perspective_point_to_equirect(p, view, pano):
    """Continuous sub-view point(s) (..., 2) to panorama (x, y); x in [0, width)."""
    p = np.asarray(p, dtype=float)
    sx, sy = p[..., 0], p[..., 1]
    tol = 1e-9
    if (
        np.any(sx < -tol)
        or np.any(sx > view.out_width + tol)
        or np.any(sy < -tol)
        or np.any(sy > view.out_height + tol)
    ):
        raise ValueError("point outside the sub-view")
    lon, lat = subview_to_geographic(sx, sy, view)
    x = lon_to_x(lon, pano.width) % pano.width
    y = lat_to_y(lat, pano.height)
    return np.stack([x, y], axis=-1)


def equirect_point_to_perspective(q, view, pano):
    """Panorama point(s) (..., 2) to continuous sub-view coordinates.

    Returns ``(points, in_front)``; points behind the camera get NaN.
    """
    q = np.asarray(q, dtype=float)
    lon = x_to_lon(q[..., 0], pano.width)
    lat = np.clip(y_to_lat(q[..., 1], pano.height), -90.0, 90.0)
    return geographic_to_perspective(lon, lat, view)


def geographic_to_perspective(lon, lat, view):
    world = geographic_to_sphere(lon, lat)
    cam = world @ rotation_matrix(view)  # R^T applied row-wise
    X, Y, Z = cam[..., 0], cam[..., 1], cam[..., 2]
    in_front = Z > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(in_front, view.T + X / Z, np.nan)
        v = np.where(in_front, view.T - Y / Z, np.nan)
    sx = u * view.out_width / (2 * view.T)
    sy = v * view.out_height / (2 * view.T)
    return np.stack([sx, sy], axis=-1), in_front


def resample_view(frame, maps):
    """Bilinear sampling of ``frame`` at the map coordinates, wrapping horizontally."""
    frame = np.asarray(frame)
    check_frame(frame, maps.pano)
    H, W = frame.shape[:2]
    xs = maps.lon_map - 0.5
    # poles are degenerate; clamp to half a pixel inside the frame
    ys = np.clip(maps.lat_map - 0.5, 0.0, H - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    x0w = x0 % W
    x1w = (x0 + 1) % W
    y1 = np.minimum(y0 + 1, H - 1)
    img = frame.astype(float)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0w] * (1 - fx) + img[y0, x1w] * fx
    bot = img[y1, x0w] * (1 - fx) + img[y1, x1w] * fx
    out = top * (1 - fy) + bot * fy
    if np.issubdtype(frame.dtype, np.integer):
        out = np.clip(np.rint(out), np.iinfo(frame.dtype).min, np.iinfo(frame.dtype).max)
    return out.astype(frame.dtype)


def check_frame(frame, pano):
    h, w = np.asarray(frame).shape[:2]
    if (w, h) != (pano.width, pano.height):
        raise ValueError(f"frame is {w}x{h}, expected {pano.width}x{pano.height}")
