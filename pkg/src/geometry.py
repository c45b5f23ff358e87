"""Convex polygons for agent shapes, plus the half spaces between them.

Polygons and half spaces are frozen and nothing here keeps state, so it's
all fine to share between planner threads.

Distances and closest points come from a small 2D GJK loop on the Minkowski
difference. A separating half space sits in the gap along the closest-point
direction: halfway by default, or leaving each side the clearance asked for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull

from src.config import EPS_GEOM, EPS_SEP

GJK_MAX_ITERATIONS = 64
GJK_REL_TOLERANCE = 1e-12


class NotSeparable(ValueError):
    """Raised when two polygons touch or overlap, so no strict separator exists."""


def _cross(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


@dataclass(frozen=True, eq=False)
class Polygon:
    vertices: np.ndarray

    def __post_init__(self) -> None:
        verts = np.array(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise ValueError(f"Polygon vertices must be an (n, 2) array, got shape {verts.shape}")
        n = verts.shape[0]
        if n < 3:
            raise ValueError(f"Polygon needs at least 3 vertices, got {n}")
        for k in range(n):
            edge = verts[(k + 1) % n] - verts[k]
            if np.linalg.norm(edge) <= EPS_GEOM:
                raise ValueError(f"Polygon has duplicate vertices at index {k}")
            nxt = verts[(k + 2) % n] - verts[(k + 1) % n]
            if _cross(edge, nxt) <= EPS_GEOM:
                raise ValueError(f"Polygon is not strictly convex counter-clockwise at vertex {(k + 1) % n}")
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)

    def __len__(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def circumradius(self) -> float:
        """Largest vertex distance from the body-frame origin."""
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))

    def edges(self) -> np.ndarray:
        return np.roll(self.vertices, -1, axis=0) - self.vertices


@dataclass(frozen=True)
class HalfSpace:
    """The open half space {p | normal . p > offset} with a unit normal."""

    normal: Tuple[float, float]
    offset: float

    def __post_init__(self) -> None:
        nx, ny = float(self.normal[0]), float(self.normal[1])
        norm = math.hypot(nx, ny)
        if abs(norm - 1.0) > EPS_GEOM * 1e3:
            raise ValueError(f"HalfSpace normal must be unit length, got norm {norm}")
        object.__setattr__(self, "normal", (nx, ny))
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_vector(cls, direction: Sequence[float], offset_point: Sequence[float]) -> "HalfSpace":
        d = np.asarray(direction, dtype=float)
        norm = float(np.linalg.norm(d))
        if norm <= EPS_GEOM:
            raise ValueError("HalfSpace direction must be nonzero")
        n = d / norm
        return cls((float(n[0]), float(n[1])), float(n @ np.asarray(offset_point, dtype=float)))

    @property
    def normal_array(self) -> np.ndarray:
        return np.array(self.normal)

    def margin(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of each point past the boundary (positive means inside)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.normal_array - self.offset

    def contains(self, point: Sequence[float]) -> bool:
        return bool(self.margin(np.asarray(point, dtype=float))[0] > 0.0)

    def contains_polygon(self, poly: Polygon, margin: float = 0.0) -> bool:
        return bool(np.all(self.margin(poly.vertices) > margin))

    def mirror(self) -> "HalfSpace":
        return HalfSpace((-self.normal[0], -self.normal[1]), -self.offset)

    def to_record(self) -> List[float]:
        return [self.normal[0], self.normal[1], self.offset]

    @classmethod
    def from_record(cls, record: Sequence[float]) -> "HalfSpace":
        return cls((record[0], record[1]), record[2])


def support_index(poly: Polygon, direction: Sequence[float]) -> int:
    d = np.asarray(direction, dtype=float)
    if d.shape != (2,) or not np.any(d != 0.0):
        raise ValueError("support direction must be a nonzero 2D vector")
    # argmax returns the first maximizer, i.e. the lowest vertex index
    return int(np.argmax(poly.vertices @ d))


def support(poly: Polygon, direction: Sequence[float]) -> np.ndarray:
    return poly.vertices[support_index(poly, direction)].copy()


def support_value(poly: Polygon, direction: Sequence[float]) -> float:
    """max over vertices of direction . v (the support function)."""
    return float(np.max(poly.vertices @ np.asarray(direction, dtype=float)))


@dataclass
class _SimplexPoint:
    w: np.ndarray
    a: np.ndarray
    b: np.ndarray
    key: Tuple[int, int]


@dataclass
class ClosestPoints:
    distance: float
    point_p: np.ndarray
    point_q: np.ndarray
    iterations: int = 0
    simplex: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def intersecting(self) -> bool:
        return self.distance <= EPS_GEOM


def _closest_on_segment(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, float]:
    ab = b - a
    denom = float(ab @ ab)
    if denom <= 0.0:
        return a.copy(), 0.0
    t = -float(a @ ab) / denom
    t = min(max(t, 0.0), 1.0)
    return a + t * ab, t


def _reduce_segment(s0: _SimplexPoint, s1: _SimplexPoint):
    point, t = _closest_on_segment(s0.w, s1.w)
    if t <= 0.0:
        return [s0], s0.w.copy(), [1.0]
    if t >= 1.0:
        return [s1], s1.w.copy(), [1.0]
    return [s0, s1], point, [1.0 - t, t]


def _reduce(simplex: List[_SimplexPoint]):
    if len(simplex) == 1:
        return simplex, simplex[0].w.copy(), [1.0]
    if len(simplex) == 2:
        return _reduce_segment(simplex[0], simplex[1])

    a, b, c = simplex
    area = _cross(b.w - a.w, c.w - a.w)
    if abs(area) > EPS_GEOM * EPS_GEOM:
        c1 = _cross(b.w - a.w, -a.w)
        c2 = _cross(c.w - b.w, -b.w)
        c3 = _cross(a.w - c.w, -c.w)
        if (c1 >= 0 and c2 >= 0 and c3 >= 0) or (c1 <= 0 and c2 <= 0 and c3 <= 0):
            return simplex, np.zeros(2), [1.0 / 3.0] * 3

    best = None
    for s0, s1 in ((a, b), (b, c), (c, a)):
        reduced = _reduce_segment(s0, s1)
        norm = float(reduced[1] @ reduced[1])
        if best is None or norm < best[0]:
            best = (norm, reduced)
    return best[1]


def closest_points(p: Polygon, q: Polygon) -> ClosestPoints:
    """GJK distance query between two convex polygons.

    Works on the Minkowski difference D = P - Q; the point of D nearest the
    origin gives the distance, and its barycentric weights give the witness
    points on each polygon.
    """

    def support_pair(direction: np.ndarray) -> _SimplexPoint:
        ia = support_index(p, direction)
        ib = support_index(q, -direction)
        a = p.vertices[ia]
        b = q.vertices[ib]
        return _SimplexPoint(w=a - b, a=a, b=b, key=(ia, ib))

    start = p.centroid - q.centroid
    if float(start @ start) <= EPS_GEOM * EPS_GEOM:
        start = np.array([1.0, 0.0])
    simplex = [support_pair(start)]
    v = simplex[0].w.copy()
    weights = [1.0]
    iterations = 0

    for iterations in range(1, GJK_MAX_ITERATIONS + 1):
        vv = float(v @ v)
        if vv <= EPS_GEOM * EPS_GEOM:
            break
        candidate = support_pair(-v)
        if vv - float(v @ candidate.w) <= GJK_REL_TOLERANCE * vv:
            break
        if any(s.key == candidate.key for s in simplex):
            break
        simplex.append(candidate)
        simplex, v, weights = _reduce(simplex)
        if len(simplex) == 3:
            v = np.zeros(2)
            break

    point_p = sum(w * s.a for w, s in zip(weights, simplex))
    point_q = sum(w * s.b for w, s in zip(weights, simplex))
    distance = float(np.linalg.norm(v))
    return ClosestPoints(
        distance=distance,
        point_p=np.asarray(point_p, dtype=float),
        point_q=np.asarray(point_q, dtype=float),
        iterations=iterations,
        simplex=[s.key for s in simplex],
    )


def polygon_distance(p: Polygon, q: Polygon) -> float:
    return closest_points(p, q).distance


def polygons_intersect(p: Polygon, q: Polygon) -> bool:
    """True when the polygons overlap or touch (distance within EPS_GEOM)."""
    return closest_points(p, q).intersecting


def separating_hyperplane(p: Polygon, q: Polygon, margin_p: float = 0.0, margin_q: float = 0.0) -> HalfSpace:
    """Half space containing p and excluding q, placed inside the gap.

    With zero margins the boundary is the bisector of the gap. Margins ask
    for that much clearance on each side: the boundary goes to the middle
    of what is left once both are taken, and if the gap is too narrow for
    both it is split in proportion to the margins. Every vertex stays
    strictly on its own side whenever the polygons don't intersect, even
    for gaps below EPS_SEP. The mirror half space (negated normal and
    offset) contains q.
    """
    if margin_p < 0 or margin_q < 0:
        raise ValueError("separation margins must be non-negative")
    result = closest_points(p, q)
    if result.intersecting:
        raise NotSeparable(f"polygons intersect (distance {result.distance:.3e})")
    direction = result.point_p - result.point_q
    normal = direction / float(np.linalg.norm(direction))
    # the offset comes from the vertex supports so the sign check is exact
    low_p = -support_value(p, -normal)
    high_q = support_value(q, normal)
    gap = low_p - high_q
    if gap <= 0.0:
        raise NotSeparable(f"no positive gap along the closest-point direction ({gap:.3e} m)")
    wanted = margin_p + margin_q
    if wanted == 0.0:
        offset = 0.5 * (low_p + high_q)
    elif gap >= wanted:
        offset = high_q + margin_q + 0.5 * (gap - wanted)
    else:
        offset = high_q + gap * margin_q / wanted
    # keep both sides strict
    edge = min(EPS_SEP, 0.5 * gap)
    offset = min(max(offset, high_q + edge), low_p - edge)
    return HalfSpace((float(normal[0]), float(normal[1])), offset)


def rotation(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s], [s, c]])


def transform_footprint(footprint: Polygon, position: Sequence[float], heading: float) -> Polygon:
    pos = np.asarray(position, dtype=float)
    return Polygon(footprint.vertices @ rotation(heading).T + pos)


def regular_polygon(radius: float, sides: int = 12, circumscribe: bool = True) -> Polygon:
    """Regular polygon centred at the origin, CCW from angle 0.

    With ``circumscribe`` the polygon contains the disk of ``radius`` (its
    inradius equals ``radius``); otherwise its vertices lie on the circle.
    """
    if radius <= 0 or sides < 3:
        raise ValueError("regular polygon needs radius > 0 and at least 3 sides")
    r = radius / math.cos(math.pi / sides) if circumscribe else radius
    angles = 2.0 * math.pi * np.arange(sides) / sides
    return Polygon(np.column_stack([r * np.cos(angles), r * np.sin(angles)]))


def convex_hull(points: Iterable[Sequence[float]]) -> Polygon:
    pts = np.unique(np.round(np.asarray(list(points), dtype=float), 12), axis=0)
    hull = ConvexHull(pts)
    ring = pts[hull.vertices]
    # drop near-collinear vertices that qhull keeps
    keep: List[np.ndarray] = []
    n = len(ring)
    for k in range(n):
        prev, cur, nxt = ring[k - 1], ring[k], ring[(k + 1) % n]
        if _cross(cur - prev, nxt - cur) > EPS_GEOM:
            keep.append(cur)
    return Polygon(np.array(keep))


def sweep_polygon(footprint: Polygon, positions: np.ndarray) -> Polygon:
    """Hull of a fixed-orientation footprint translated along the given positions."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    cloud = (pos[:, None, :] + footprint.vertices[None, :, :]).reshape(-1, 2)
    return convex_hull(cloud)
