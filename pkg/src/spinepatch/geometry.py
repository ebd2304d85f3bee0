"""Planar primitives in pixel coordinates.

Convention: origin at the top-left pixel centre, +X to the right, +Y downward.
Pixel ``(col, row)`` has its centre at ``Point(col, row)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidGeometryError

BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidGeometryError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class BBox:
    """Closed axis-aligned rectangle ``[x0, x1] x [y0, y1]``."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x0, self.y0, self.x1, self.y1)):
            raise InvalidGeometryError(f"non-finite box {self}")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise InvalidGeometryError(f"inverted box {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def contains(self, p: Point) -> bool:
        return self.x0 <= p.x <= self.x1 and self.y0 <= p.y <= self.y1

    def contains_box(self, other: "BBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def clamp(self, x0: float, y0: float, x1: float, y1: float) -> "BBox | None":
        """Intersection with another rectangle, or None when they are disjoint."""
        nx0, ny0 = max(self.x0, x0), max(self.y0, y0)
        nx1, ny1 = min(self.x1, x1), min(self.y1, y1)
        if nx0 > nx1 or ny0 > ny1:
            return None
        return BBox(nx0, ny0, nx1, ny1)


def _signed_area2(xs: np.ndarray, ys: np.ndarray) -> float:
    return float(np.sum(xs * np.roll(ys, -1) - np.roll(xs, -1) * ys))


class Polygon:
    """Closed polygon; the closing edge is implicit.

    On construction consecutive duplicates (including last == first) are
    dropped and vertex order is normalised to counter-clockwise as displayed
    on screen, which in the +Y-down frame means a negative shoelace sum.
    Polygons with fewer than three vertices are allowed to exist (a traced
    single pixel, for instance) but area and containment operations reject
    them.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices: Iterable[Point | tuple[float, float]]):
        pts = [v if isinstance(v, Point) else Point(float(v[0]), float(v[1])) for v in vertices]
        cleaned: list[Point] = []
        for p in pts:
            if not cleaned or cleaned[-1] != p:
                cleaned.append(p)
        while len(cleaned) > 1 and cleaned[0] == cleaned[-1]:
            cleaned.pop()
        if not cleaned:
            raise InvalidGeometryError("polygon has no vertices")
        if len(cleaned) >= 3:
            xs = np.array([p.x for p in cleaned])
            ys = np.array([p.y for p in cleaned])
            if _signed_area2(xs, ys) > 0:
                cleaned = [cleaned[0]] + cleaned[:0:-1]
        self.vertices: tuple[Point, ...] = tuple(cleaned)

    def __len__(self):
        return len(self.vertices)

    def __iter__(self):
        return iter(self.vertices)

    def __eq__(self, other):
        return isinstance(other, Polygon) and self.vertices == other.vertices

    def __hash__(self):
        return hash(self.vertices)

    def __repr__(self):
        inner = ", ".join(f"({p.x:g}, {p.y:g})" for p in self.vertices)
        return f"Polygon([{inner}])"

    def as_array(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.vertices], dtype=float)

    def require_valid(self) -> None:
        if len(self.vertices) < 3:
            raise InvalidGeometryError(
                f"polygon needs at least 3 vertices, got {len(self.vertices)}")

    def area(self) -> float:
        self.require_valid()
        arr = self.as_array()
        return abs(_signed_area2(arr[:, 0], arr[:, 1])) / 2.0

    def centroid(self) -> Point:
        """Area centroid; falls back to the vertex mean for zero-area input."""
        self.require_valid()
        arr = self.as_array()
        xs, ys = arr[:, 0], arr[:, 1]
        xn, yn = np.roll(xs, -1), np.roll(ys, -1)
        cross = xs * yn - xn * ys
        a2 = cross.sum()
        if abs(a2) < 1e-12:
            return Point(float(xs.mean()), float(ys.mean()))
        cx = ((xs + xn) * cross).sum() / (3.0 * a2)
        cy = ((ys + yn) * cross).sum() / (3.0 * a2)
        return Point(float(cx), float(cy))


def _on_segment(px, py, ax, ay, bx, by, tol=BOUNDARY_TOL) -> bool:
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        return math.hypot(px - ax, py - ay) <= tol
    t = ((px - ax) * dx + (py - ay) * dy) / seg2
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy)) <= tol


def point_in_polygon(p: Point, poly: Polygon) -> bool:
    """Even-odd crossing test; points on the boundary count as inside."""
    poly.require_valid()
    verts = poly.vertices
    n = len(verts)
    inside = False
    for i in range(n):
        a = verts[i]
        b = verts[(i + 1) % n]
        if _on_segment(p.x, p.y, a.x, a.y, b.x, b.y):
            return True
        if (a.y > p.y) != (b.y > p.y):
            x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y)
            if p.x < x_cross:
                inside = not inside
    return inside


def points_in_polygon(xs: np.ndarray, ys: np.ndarray, poly: Polygon) -> np.ndarray:
    """Vectorised :func:`point_in_polygon` over coordinate arrays."""
    poly.require_valid()
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    boundary = np.zeros_like(inside)
    arr = poly.as_array()
    n = len(arr)
    for i in range(n):
        ax, ay = arr[i]
        bx, by = arr[(i + 1) % n]
        dx, dy = bx - ax, by - ay
        seg2 = dx * dx + dy * dy
        if seg2 > 0:
            t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / seg2, 0.0, 1.0)
        else:
            t = 0.0
        dist = np.hypot(xs - (ax + t * dx), ys - (ay + t * dy))
        boundary |= dist <= BOUNDARY_TOL
        straddle = (ay > ys) != (by > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = ax + (ys - ay) * dx / (by - ay)
        inside ^= straddle & (xs < x_cross)
    return inside | boundary


def bbox_of(poly: Polygon) -> BBox:
    arr = poly.as_array()
    return BBox(float(arr[:, 0].min()), float(arr[:, 1].min()),
                float(arr[:, 0].max()), float(arr[:, 1].max()))


def expand_contour(poly: Polygon, dx_minus_x: float, dy_plus_y: float) -> Polygon:
    """Shift the left half of a contour by -dx and its lower half by +dy.

    A vertex is "left" when its x is at most the centroid's x and "lower"
    when its y is at least the centroid's y (+Y is down). Lower-left
    vertices receive both shifts.
    """
    poly.require_valid()
    if dx_minus_x < 0 or dy_plus_y < 0:
        raise InvalidArgumentError(
            f"expansion must be non-negative, got dx={dx_minus_x}, dy={dy_plus_y}")
    if dx_minus_x == 0 and dy_plus_y == 0:
        return poly
    c = poly.centroid()
    moved = []
    for v in poly.vertices:
        x = v.x - dx_minus_x if v.x <= c.x else v.x
        y = v.y + dy_plus_y if v.y >= c.y else v.y
        moved.append(Point(x, y))
    return Polygon(moved)


def bbox_intersects(a: BBox, b: BBox) -> bool:
    return a.x0 <= b.x1 and b.x0 <= a.x1 and a.y0 <= b.y1 and b.y0 <= a.y1


def point_to_box(p: Point, half_extent: float) -> BBox:
    if not half_extent > 0:
        raise InvalidArgumentError(f"half_extent must be positive, got {half_extent}")
    return BBox(p.x - half_extent, p.y - half_extent, p.x + half_extent, p.y + half_extent)


def segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool:
    """True when closed segments ab and cd share a point."""

    def orient(p, q, r):
        v = (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x)
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def within(p, q, r):
        return (min(p.x, q.x) - 1e-12 <= r.x <= max(p.x, q.x) + 1e-12
                and min(p.y, q.y) - 1e-12 <= r.y <= max(p.y, q.y) + 1e-12)

    o1, o2, o3, o4 = orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and within(a, b, c)) or (o2 == 0 and within(a, b, d))
            or (o3 == 0 and within(c, d, a)) or (o4 == 0 and within(c, d, b)))


def is_simple(poly: Polygon) -> bool:
    """No two non-adjacent edges touch."""
    v: Sequence[Point] = poly.vertices
    n = len(v)
    if n < 3:
        return False
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                return False
    return True
