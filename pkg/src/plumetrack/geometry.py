"""Obstacle-masked Cartesian grid over a building footprint domain.

Building footprints come in as GeoJSON polygons in lon/lat, get linearized to
local meters about the bounding-box center, and are rasterized onto a uniform
square-cell grid.  A cell is solid when its center falls inside a footprint;
the fluid cells are the model's nodes, numbered 0..M-1 in row-major order.

Spatial queries (which node holds a point, which nodes a straight move visits,
whether a heading is obstructed) all operate on this grid.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0

_grid_serial = itertools.count()


class DomainError(ValueError):
    """Raised for malformed footprints or unusable grid configurations."""


@dataclass(frozen=True)
class DomainSpec:
    """Bounding box plus building footprints, all in local meters.

    Polygons are stored counter-clockwise without a repeated closing vertex.
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    buildings: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        bmin = np.asarray(self.bbox_min, dtype=float)
        bmax = np.asarray(self.bbox_max, dtype=float)
        object.__setattr__(self, "bbox_min", bmin)
        object.__setattr__(self, "bbox_max", bmax)
        if not np.all(bmax > bmin):
            raise DomainError(f"bbox has non-positive extent: {bmin} .. {bmax}")
        polys = [_normalize_polygon(np.asarray(p, dtype=float)) for p in self.buildings]
        object.__setattr__(self, "buildings", polys)
        for i, poly in enumerate(polys):
            if np.any(poly < bmin - 1e-9) or np.any(poly > bmax + 1e-9):
                raise DomainError(f"building {i} extends outside the bounding box")

    @property
    def extent(self):
        return self.bbox_max - self.bbox_min


@dataclass(frozen=True)
class DronePose:
    """Continuous observer state: position (m), speed (m/s), heading (rad)."""

    position: np.ndarray
    speed: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "heading", float(np.mod(self.heading, 2.0 * np.pi)))


@dataclass(frozen=True)
class Grid:
    """Uniform square-cell grid with a fluid/solid mask.

    mask[iy, ix] is True for fluid cells.  node_index maps fluid cells to
    contiguous node ids 0..M-1 (row-major, -1 for solid).  Immutable after
    construction; safe for concurrent reads.
    """

    nx: int
    ny: int
    h: float
    origin: np.ndarray
    mask: np.ndarray
    node_index: np.ndarray
    node_cells: np.ndarray
    node_xy: np.ndarray
    M: int
    serial: int = field(default_factory=lambda: next(_grid_serial))

    def __post_init__(self):
        for name in ("origin", "mask", "node_index", "node_cells", "node_xy"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def extent(self):
        return np.array([self.nx * self.h, self.ny * self.h])

    def contains(self, point) -> bool:
        """True when the point lies inside the (closed) bounding box."""
        p = np.asarray(point, dtype=float) - self.origin
        ext = self.extent
        return bool(np.all(p >= -1e-12) and np.all(p <= ext + 1e-12))

    def cell_of(self, point):
        """(ix, iy) of the cell containing the point; boundary points belong
        to the last cell along that axis."""
        p = (np.asarray(point, dtype=float) - self.origin) / self.h
        ix = min(int(math.floor(p[0])), self.nx - 1)
        iy = min(int(math.floor(p[1])), self.ny - 1)
        return max(ix, 0), max(iy, 0)

    def node_at(self, point) -> int:
        """Node id of the cell containing the point, or -1 on a solid cell."""
        if not self.contains(point):
            return -1
        ix, iy = self.cell_of(point)
        return int(self.node_index[iy, ix])

    def is_fluid_point(self, point) -> bool:
        return self.node_at(point) >= 0


@dataclass(frozen=True)
class TraverseResult:
    """Fluid nodes visited by a straight segment, in travel order.

    blocked is True when the segment reached a solid cell (or left the box);
    nodes then end at the last free node before the obstruction.
    """

    nodes: list[int]
    blocked: bool = False


def points_in_polygon(points, polygon):
    """Even-odd-rule point-in-polygon test, vectorized over points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    px, py = polygon[:, 0], polygon[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    for i in range(len(polygon)):
        crosses = (py[i] > y) != (qy[i] > y)
        if not np.any(crosses):
            continue
        x_hit = px[i] + (y - py[i]) * (qx[i] - px[i]) / (qy[i] - py[i])
        inside ^= crosses & (x < x_hit)
    return inside


def _normalize_polygon(poly):
    """Drop a repeated closing vertex, require simplicity, orient CCW."""
    if poly.ndim != 2 or poly.shape[1] != 2:
        raise DomainError("polygon must be an (K, 2) vertex array")
    if len(poly) > 1 and np.allclose(poly[0], poly[-1]):
        poly = poly[:-1]
    distinct = [poly[0]]
    for v in poly[1:]:
        if not np.allclose(v, distinct[-1]):
            distinct.append(v)
    poly = np.asarray(distinct)
    if len(poly) < 3:
        raise DomainError("degenerate polygon: fewer than 3 distinct vertices")
    if _self_intersects(poly):
        raise DomainError("polygon is self-intersecting")
    area2 = _signed_area2(poly)
    if abs(area2) < 1e-12:
        raise DomainError("degenerate polygon: zero area")
    if area2 < 0:
        poly = poly[::-1].copy()
    return poly


def _signed_area2(poly):
    x, y = poly[:, 0], poly[:, 1]
    return float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _self_intersects(poly):
    n = len(poly)
    segs = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # shared endpoints are fine
            if _segments_cross(*segs[i], *segs[j]):
                return True
    return False


def _segments_cross(a, b, c, d):
    def orient(p, q, r):
        v = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def load_domain(geojson_text: str, bbox_lonlat=None) -> DomainSpec:
    """Parse a GeoJSON FeatureCollection of building footprints.

    The bounding box comes from the collection's top-level ``bbox`` member
    ([west, south, east, north]) or from the bbox_lonlat argument.  All
    coordinates are linearized to meters about the bbox center
    (equirectangular) and shifted so bbox_min is the origin.
    """
    try:
        doc = json.loads(geojson_text)
    except json.JSONDecodeError as exc:
        raise DomainError(f"invalid GeoJSON: {exc}") from exc
    if doc.get("type") != "FeatureCollection":
        raise DomainError("expected a GeoJSON FeatureCollection")

    bbox = doc.get("bbox", bbox_lonlat)
    if bbox is None:
        raise DomainError("no bounding box: supply a 'bbox' member or pass one explicitly")
    bbox = np.asarray(bbox, dtype=float).reshape(-1)
    if bbox.size != 4:
        raise DomainError("bbox must be [west, south, east, north]")
    west, south, east, north = bbox

    lon0 = 0.5 * (west + east)
    lat0 = 0.5 * (south + north)
    kx = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * math.pi / 180.0
    ky = EARTH_RADIUS_M * math.pi / 180.0

    def to_meters(lonlat):
        ll = np.asarray(lonlat, dtype=float)
        return np.column_stack([(ll[:, 0] - lon0) * kx, (ll[:, 1] - lat0) * ky])

    corner_min = np.array([(west - lon0) * kx, (south - lat0) * ky])
    corner_max = np.array([(east - lon0) * kx, (north - lat0) * ky])

    buildings = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise DomainError(f"unsupported geometry type: {geom.get('type')!r}")
        rings = geom.get("coordinates") or []
        if not rings:
            raise DomainError("polygon feature without coordinates")
        exterior = to_meters(rings[0])
        buildings.append(exterior - corner_min)

    return DomainSpec(
        bbox_min=np.zeros(2),
        bbox_max=corner_max - corner_min,
        buildings=buildings,
    )


def rasterize(domain: DomainSpec, h: float) -> Grid:
    """Mask a uniform grid against the building footprints.

    A cell is solid iff its center lies inside some footprint.  When the bbox
    extent is not a multiple of h, cell counts are rounded and the actual cell
    size is recomputed (logged).
    """
    if h <= 0:
        raise DomainError("cell size must be positive")
    ex, ey = domain.extent
    nx = int(round(ex / h))
    ny_guess = ey / h
    if nx < 1 or round(ny_guess) < 1:
        raise DomainError(f"cell size {h} exceeds the domain extent {ex}x{ey}")
    h_act = ex / nx
    ny = max(1, int(round(ey / h_act)))
    if abs(h_act - h) > 1e-9 * h or abs(ny * h_act - ey) > 1e-9 * max(ey, 1.0):
        log.info("grid snapped: requested h=%.6g, actual h=%.6g (%dx%d cells)", h, h_act, nx, ny)

    xs = domain.bbox_min[0] + (np.arange(nx) + 0.5) * h_act
    ys = domain.bbox_min[1] + (np.arange(ny) + 0.5) * h_act
    cx, cy = np.meshgrid(xs, ys)
    centers = np.column_stack([cx.ravel(), cy.ravel()])

    solid = np.zeros(len(centers), dtype=bool)
    for poly in domain.buildings:
        solid |= points_in_polygon(centers, poly)
    mask = ~solid.reshape(ny, nx)

    M = int(mask.sum())
    if M == 0:
        raise DomainError("no fluid cells: buildings cover the whole grid")
    if 1.0 - M / (nx * ny) > 0.9:
        raise DomainError("buildings cover more than 90% of the domain")

    node_index = np.full((ny, nx), -1, dtype=np.int64)
    node_index[mask] = np.arange(M)
    iy, ix = np.nonzero(mask)
    node_cells = np.column_stack([ix, iy]).astype(np.int64)
    node_xy = np.column_stack([xs[ix], ys[iy]])

    return Grid(
        nx=nx, ny=ny, h=h_act, origin=domain.bbox_min.copy(),
        mask=mask, node_index=node_index,
        node_cells=node_cells, node_xy=node_xy, M=M,
    )


def traverse(grid: Grid, start, end) -> TraverseResult:
    """Walk the cells a straight segment passes through, in travel order.

    Uses exact 2D digital differential cell stepping.  Ties at cell corners
    step diagonally, so the visited set is symmetric under reversal.  The
    start cell must be fluid; hitting a solid cell or the box edge stops the
    walk with blocked=True.
    """
    a = np.asarray(start, dtype=float)
    b = np.asarray(end, dtype=float)
    if not grid.contains(a) or grid.node_at(a) < 0:
        raise DomainError(f"traverse start {a} is not in the fluid region")

    ix, iy = grid.cell_of(a)
    if not grid.contains(b):
        # clip the walk at the box edge; leaving the box counts as blocked
        return _walk(grid, a, b, ix, iy, clip=True)
    bx, by = grid.cell_of(b)
    return _walk(grid, a, b, ix, iy, target=(bx, by))


def _walk(grid, a, b, ix, iy, target=None, clip=False):
    nodes = []
    d = b - a
    h = grid.h

    def visit(jx, jy):
        nid = int(grid.node_index[jy, jx])
        if nid < 0:
            return False
        nodes.append(nid)
        return True

    if not visit(ix, iy):  # pragma: no cover - start checked by caller
        return TraverseResult([], blocked=True)
    if np.hypot(*d) < 1e-15:
        return TraverseResult(nodes)

    step_x = 1 if d[0] > 0 else (-1 if d[0] < 0 else 0)
    step_y = 1 if d[1] > 0 else (-1 if d[1] < 0 else 0)
    rel = (a - grid.origin) / h

    tx = (ix + 1 - rel[0]) * h / d[0] if step_x > 0 else ((ix - rel[0]) * h / d[0] if step_x < 0 else math.inf)
    ty = (iy + 1 - rel[1]) * h / d[1] if step_y > 0 else ((iy - rel[1]) * h / d[1] if step_y < 0 else math.inf)
    dtx = h / abs(d[0]) if step_x != 0 else math.inf
    dty = h / abs(d[1]) if step_y != 0 else math.inf

    for _ in range(2 * (grid.nx + grid.ny) + 4):
        if target is not None and (ix, iy) == target:
            return TraverseResult(nodes)
        if min(tx, ty) > 1.0 + 1e-12:
            return TraverseResult(nodes, blocked=clip)
        if abs(tx - ty) < 1e-12 and step_x != 0 and step_y != 0:
            ix += step_x
            iy += step_y
            tx += dtx
            ty += dty
        elif tx < ty:
            ix += step_x
            tx += dtx
        else:
            iy += step_y
            ty += dty
        if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
            return TraverseResult(nodes, blocked=True)
        if not visit(ix, iy):
            return TraverseResult(nodes, blocked=True)
    return TraverseResult(nodes, blocked=True)  # pragma: no cover - safety cap


def is_heading_free(grid: Grid, pose: DronePose, heading: float, distance: float) -> bool:
    """True when a straight move of the given length stays inside the box and
    crosses only fluid cells."""
    start = pose.position
    end = start + distance * np.array([math.cos(heading), math.sin(heading)])
    if not grid.contains(end):
        return False
    return not traverse(grid, start, end).blocked
