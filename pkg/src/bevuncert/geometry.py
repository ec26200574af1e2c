"""Box <-> vertex conversion and polyline resampling in the BEV plane.

Conventions: length runs along the heading, width perpendicular to it. A
dynamic vertex set is ``[front-left, front-right, rear-right, rear-left,
center]``; "left" is +y in the vehicle frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

N_DYNAMIC = 5
_CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])


class GeometryError(ValueError):
    pass


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    t = math.remainder(theta, 2.0 * math.pi)
    return math.pi if t == -math.pi else t


@dataclass(frozen=True)
class Box7:
    x: float
    y: float
    z: float
    width: float
    length: float
    height: float
    heading: float

    def __post_init__(self):
        for name in ("width", "length"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise GeometryError(f"Box7.{name} must be finite and > 0, got {v}")
        # height == 0 marks a box recovered from BEV vertices (height unobservable)
        if not (math.isfinite(self.height) and self.height >= 0):
            raise GeometryError(f"Box7.height must be finite and >= 0, got {self.height}")
        for name in ("x", "y", "z", "heading"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"Box7.{name} must be finite")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_tuple(self) -> tuple[float, ...]:
        return (self.x, self.y, self.z, self.width, self.length, self.height, self.heading)


@dataclass(frozen=True)
class VertexSet:
    points: np.ndarray  # (K, 2)
    kind: str  # "static" | "dynamic"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError(f"vertex points must be (K, 2), got {pts.shape}")
        if self.kind not in ("static", "dynamic"):
            raise GeometryError(f"unknown vertex-set kind {self.kind!r}")
        if self.kind == "dynamic" and len(pts) != N_DYNAMIC:
            raise GeometryError(f"a dynamic vertex set has {N_DYNAMIC} points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("vertex coordinates must be finite")
        object.__setattr__(self, "points", pts)


def _cos_sin(theta):
    # cos(pi/2) evaluates to 6e-17; snap so quarter turns rotate exactly
    c, s = np.cos(theta), np.sin(theta)
    c = np.where(np.abs(c) < 1e-15, 0.0, c)
    s = np.where(np.abs(s) < 1e-15, 0.0, s)
    return c, s


def box_corners(x, y, length, width, heading) -> np.ndarray:
    """Vectorised corner + center computation. Inputs broadcast; returns (..., 5, 2)."""
    x, y, length, width, heading = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (x, y, length, width, heading)))
    c, s = _cos_sin(heading)
    half = np.stack([length / 2.0, width / 2.0], axis=-1)[..., None, :] * _CORNER_SIGNS  # (...,4,2)
    dx, dy = half[..., 0], half[..., 1]
    cx = x[..., None] + c[..., None] * dx - s[..., None] * dy
    cy = y[..., None] + s[..., None] * dx + c[..., None] * dy
    corners = np.stack([cx, cy], axis=-1)
    center = np.stack([x, y], axis=-1)[..., None, :]
    return np.concatenate([corners, center], axis=-2)


def box_to_vertices(b: Box7) -> VertexSet:
    return VertexSet(box_corners(b.x, b.y, b.length, b.width, b.heading), "dynamic")


def vertices_to_box(v: VertexSet, tol: float = 1e-6) -> Box7:
    """Recover (x, y, width, length, heading) from an exact rectangle.

    z and height are not observable in BEV and come back as 0.
    """
    if v.kind != "dynamic":
        raise GeometryError("vertices_to_box needs a dynamic vertex set")
    fl, fr, rr, rl, _ = v.points
    m1, m2 = (fl + rr) / 2.0, (fr + rl) / 2.0
    if np.max(np.abs(m1 - m2)) > tol:
        raise GeometryError("corner diagonals do not bisect each other: not a rectangle")
    center = (m1 + m2) / 2.0
    front = (fl + fr) / 2.0 - center
    left = (fl + rl) / 2.0 - center
    length = 2.0 * math.hypot(*front)
    width = 2.0 * math.hypot(*left)
    if length <= 0 or width <= 0:
        raise GeometryError("degenerate rectangle")
    if abs(float(np.dot(front, left))) > tol * max(length * width, 1.0):
        raise GeometryError("corner edges are not perpendicular: not a rectangle")
    heading = math.atan2(front[1], front[0])
    return Box7(float(center[0]), float(center[1]), 0.0, width, length, 0.0, heading)


def resample_polyline(points, k: int) -> VertexSet:
    """``k`` points at uniform arc-length fractions along the polyline; endpoints exact."""
    if k < 2:
        raise GeometryError("K must be >= 2")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise GeometryError("a polyline needs at least 2 (x, y) points")
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if not total > 0:
        raise GeometryError("degenerate polyline: total length is 0")
    targets = total * np.arange(k) / (k - 1)
    out = np.empty((k, 2))
    out[:, 0] = np.interp(targets, cum, pts[:, 0])
    out[:, 1] = np.interp(targets, cum, pts[:, 1])
    out[0], out[-1] = pts[0], pts[-1]
    return VertexSet(out, "static")


def point_rect_distance(px, py, box_x, box_y, length, width, heading):
    """Euclidean distance from points to filled rectangles (0 inside). Broadcasts."""
    dx = np.asarray(px, dtype=np.float64) - box_x
    dy = np.asarray(py, dtype=np.float64) - box_y
    c, s = np.cos(heading), np.sin(heading)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    ex = np.maximum(np.abs(lx) - np.asarray(length) / 2.0, 0.0)
    ey = np.maximum(np.abs(ly) - np.asarray(width) / 2.0, 0.0)
    return np.hypot(ex, ey)


def point_polyline_distance(p, polyline) -> np.ndarray:
    """Distance from each point in ``p`` (N, 2) to a polyline (M, 2)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    a = np.asarray(polyline, dtype=np.float64)[:-1]
    b = np.asarray(polyline, dtype=np.float64)[1:]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    ap = p[:, None, :] - a[None]
    t = np.clip(np.sum(ap * ab[None], axis=2) / denom, 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.min(np.hypot(*(p[:, None, :] - proj).transpose(2, 0, 1)), axis=1)
