import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinepatch.errors import InvalidArgumentError, InvalidGeometryError
from spinepatch.geometry import (BBox, Point, Polygon, bbox_intersects, bbox_of, expand_contour,
                                 is_simple, point_in_polygon, point_to_box, points_in_polygon)

SQUARE = Polygon([(0, 0), (4, 0), (4, 4), (0, 4)])


def winding_number(p, verts):
    """Independent oracle: sum of signed angles subtended by each edge."""
    total = 0.0
    n = len(verts)
    for i in range(n):
        ax, ay = verts[i][0] - p[0], verts[i][1] - p[1]
        bx, by = verts[(i + 1) % n][0] - p[0], verts[(i + 1) % n][1] - p[1]
        total += math.atan2(ax * by - ay * bx, ax * bx + ay * by)
    return round(total / (2 * math.pi))


def dist_to_edges(p, verts):
    best = math.inf
    n = len(verts)
    for i in range(n):
        a, b = np.array(verts[i], float), np.array(verts[(i + 1) % n], float)
        d = b - a
        t = np.clip(np.dot(np.array(p) - a, d) / np.dot(d, d), 0, 1)
        best = min(best, float(np.linalg.norm(np.array(p) - (a + t * d))))
    return best


def star_polygon(rng, n=None):
    """Random simple polygon: sorted angles, random radii around a centre."""
    n = n or int(rng.integers(3, 12))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(2, 20, n)
    cx, cy = rng.uniform(-10, 10, 2)
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]


def test_point_in_square():
    assert point_in_polygon(Point(1, 1), SQUARE)
    assert not point_in_polygon(Point(5, 5), SQUARE)


def test_boundary_counts_as_inside():
    assert point_in_polygon(Point(4, 2), SQUARE)
    assert point_in_polygon(Point(0, 0), SQUARE)
    assert not point_in_polygon(Point(4 + 1e-6, 2), SQUARE)


def test_degenerate_polygon_rejected():
    with pytest.raises(InvalidGeometryError):
        point_in_polygon(Point(0, 0), Polygon([(0, 0), (1, 1)]))


def test_point_in_polygon_matches_winding_oracle(rng):
    checked = 0
    while checked < 1000:
        verts = star_polygon(rng)
        poly = Polygon(verts)
        p = tuple(rng.uniform(-30, 30, 2))
        if dist_to_edges(p, verts) < 1e-6:
            continue
        assert point_in_polygon(Point(*p), poly) == (winding_number(p, verts) != 0)
        checked += 1


def test_vectorised_matches_scalar(rng):
    poly = Polygon(star_polygon(rng, 9))
    xs, ys = rng.uniform(-30, 30, (2, 500))
    vec = points_in_polygon(xs, ys, poly)
    assert list(vec) == [point_in_polygon(Point(x, y), poly) for x, y in zip(xs, ys)]


def test_orientation_normalised_to_negative_shoelace():
    cw = Polygon([(0, 0), (0, 4), (4, 4), (4, 0)])
    ccw = Polygon([(0, 0), (4, 0), (4, 4), (0, 4)])
    for poly in (cw, ccw):
        a = poly.as_array()
        s = np.sum(a[:, 0] * np.roll(a[:, 1], -1) - np.roll(a[:, 0], -1) * a[:, 1])
        assert s < 0


def test_duplicate_vertices_dropped():
    poly = Polygon([(0, 0), (0, 0), (4, 0), (4, 4), (0, 4), (0, 0)])
    assert len(poly) == 4


def test_area_and_centroid():
    assert SQUARE.area() == 16
    assert SQUARE.centroid() == Point(2, 2)


def test_bbox_of_examples(rng):
    assert bbox_of(SQUARE) == BBox(0, 0, 4, 4)
    assert bbox_of(Polygon([(0, 0), (10, 0), (5, 2)])) == BBox(0, 0, 10, 2)
    for _ in range(50):
        verts = np.array(star_polygon(rng))
        b = bbox_of(Polygon(verts))
        assert (b.x0, b.y0, b.x1, b.y1) == (verts[:, 0].min(), verts[:, 1].min(),
                                            verts[:, 0].max(), verts[:, 1].max())


def test_expand_square_example():
    out = expand_contour(Polygon([(0, 0), (2, 0), (2, 2), (0, 2)]), 1, 1)
    assert bbox_of(out) == BBox(-1, 0, 2, 3)


def test_expand_zero_is_identity(rng):
    poly = Polygon(star_polygon(rng))
    assert expand_contour(poly, 0, 0) == poly


def test_expand_negative_rejected():
    with pytest.raises(InvalidArgumentError):
        expand_contour(SQUARE, -1, 0)


def test_expand_contains_input_rectangles(rng):
    for _ in range(100):
        x0, y0 = rng.uniform(-50, 50, 2)
        w, h = rng.uniform(2, 40, 2)
        poly = Polygon([(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h)])
        grown = expand_contour(poly, float(rng.uniform(0, 10)), float(rng.uniform(0, 10)))
        xs, ys = np.meshgrid(np.linspace(x0, x0 + w, 21), np.linspace(y0, y0 + h, 21))
        assert points_in_polygon(xs, ys, grown).all()


def test_expand_grows_bbox_by_exact_amounts():
    # extreme vertices strictly left of and below the centroid
    poly = Polygon([(0, 5), (6, 0), (10, 4), (4, 10)])
    a, b = bbox_of(poly), bbox_of(expand_contour(poly, 7, 2))
    assert math.isclose(b.width, a.width + 7)
    assert math.isclose(b.height, a.height + 2)


def test_bbox_intersects_examples():
    a = BBox(0, 0, 10, 10)
    assert bbox_intersects(a, BBox(5, 5, 15, 15))
    assert not bbox_intersects(a, BBox(11, 0, 20, 10))
    assert bbox_intersects(a, BBox(10, 0, 20, 10))


boxes = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 30), st.floats(0, 30)).map(
    lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_bbox_intersects_symmetric_and_reflexive(a, b):
    assert bbox_intersects(a, b) == bbox_intersects(b, a)
    assert bbox_intersects(a, a)


def test_point_to_box():
    assert point_to_box(Point(100, 100), 18) == BBox(82, 82, 118, 118)
    assert point_to_box(Point(0, 0), 5) == BBox(-5, -5, 5, 5)
    for half, side in ((5, 10), (9, 18), (18, 36), (27, 54)):
        assert point_to_box(Point(0, 0), half).width == side
    with pytest.raises(InvalidArgumentError):
        point_to_box(Point(0, 0), 0)


def test_bbox_invariants():
    with pytest.raises(InvalidGeometryError):
        BBox(2, 0, 1, 1)
    with pytest.raises(InvalidGeometryError):
        Point(math.nan, 0)
    assert BBox(0, 0, 10, 10).clamp(20, 20, 30, 30) is None
    assert BBox(0, 0, 10, 10).clamp(5, -5, 30, 5) == BBox(5, 0, 10, 5)


def test_is_simple():
    assert is_simple(SQUARE)
    assert not is_simple(Polygon([(0, 0), (4, 4), (4, 0), (0, 4)]))
