"""Polygon primitives: pixel-boundary tracing, rasterization, GeoJSON I/O.

Polygons produced from rasters trace exact pixel edges, so their shoelace
area equals pixel_count * pixel_size**2 to rounding. Rasterization uses the
pixel-center-in-polygon rule with even-odd counting, which makes tracing and
rasterizing exact inverses on the source grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .raster import GridMeta

AREA_RTOL = 1e-6


# ---------------------------------------------------------------------------
# ring helpers
# ---------------------------------------------------------------------------


def ring_signed_area(ring) -> float:
    """Shoelace signed area of a closed ring, in map units squared."""
    ring = np.asarray(ring, dtype=np.float64)
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _as_ring(coords) -> np.ndarray:
    ring = np.asarray(coords, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise ValueError(f"a ring must be an (N, 2) array, got shape {ring.shape}")
    if ring.shape[0] < 4:
        raise ValueError(f"a closed ring needs at least 4 vertices, got {ring.shape[0]}")
    if not np.array_equal(ring[0], ring[-1]):
        raise ValueError("ring is not closed (first vertex != last vertex)")
    if not np.all(np.isfinite(ring)):
        raise ValueError("ring contains non-finite coordinates")
    ring.flags.writeable = False
    return ring


@dataclass(frozen=True)
class Polygon:
    """One disturbance footprint: exterior ring, optional holes, metadata.

    ``area_m2`` may be passed explicitly (e.g. pixel_count * pixel_size**2
    from the labelling step); it is checked against the ring geometry.
    """

    exterior: np.ndarray
    holes: tuple[np.ndarray, ...] = ()
    year: int | None = None
    area_m2: float | None = None
    source_tag: str = ""
    pixel_count: int | None = None
    region_label: int | None = None

    def __post_init__(self):
        ext = _as_ring(self.exterior)
        holes = tuple(_as_ring(h) for h in self.holes)
        geom_area = abs(ring_signed_area(ext)) - sum(abs(ring_signed_area(h)) for h in holes)
        if self.area_m2 is None:
            object.__setattr__(self, "area_m2", geom_area)
        elif not np.isclose(self.area_m2, geom_area, rtol=AREA_RTOL, atol=0.0):
            raise ValueError(
                f"area_m2={self.area_m2} does not match ring geometry ({geom_area})"
            )
        if self.area_m2 <= 0:
            raise ValueError(f"polygon area must be positive, got {self.area_m2}")
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(self, "holes", holes)

    def rings(self) -> list[np.ndarray]:
        return [self.exterior, *self.holes]

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the exterior ring."""
        return (
            float(self.exterior[:, 0].min()),
            float(self.exterior[:, 1].min()),
            float(self.exterior[:, 0].max()),
            float(self.exterior[:, 1].max()),
        )


@dataclass(frozen=True)
class PolygonSet:
    """An ordered collection of polygons, e.g. one pipeline run's output."""

    polygons: tuple[Polygon, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "polygons", tuple(self.polygons))

    def __len__(self) -> int:
        return len(self.polygons)

    def __iter__(self) -> Iterator[Polygon]:
        return iter(self.polygons)

    def __getitem__(self, i: int) -> Polygon:
        return self.polygons[i]

    def for_year(self, year: int) -> "PolygonSet":
        return PolygonSet(tuple(p for p in self.polygons if p.year == year))

    def with_area_at_least(self, min_area_m2: float) -> "PolygonSet":
        return PolygonSet(tuple(p for p in self.polygons if p.area_m2 >= min_area_m2))

    def years(self) -> tuple[int, ...]:
        return tuple(sorted({p.year for p in self.polygons if p.year is not None}))

    def total_area(self) -> float:
        return float(sum(p.area_m2 for p in self.polygons))


# ---------------------------------------------------------------------------
# tracing pixel-edge boundaries of a boolean mask region
# ---------------------------------------------------------------------------

# Directed boundary edges keep the region on the right-hand side in lattice
# coordinates (x = column, y = row, y growing downwards). At a corner where
# two diagonal pixels pinch, the walk takes the sharpest clockwise turn:
# that joins 8-connected foreground across the corner and keeps 4-connected
# background holes separate, matching the labelling connectivity.


def trace_rings(mask: np.ndarray, meta: GridMeta, row0: int = 0, col0: int = 0
                ) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Trace the pixel-edge boundary of one connected region.

    ``mask`` is a boolean window located at (row0, col0) of the grid.
    Returns (exterior_ring, holes) in map coordinates.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot trace an empty region")
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask

    edges: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(x0, y0, x1, y1):
        edges.setdefault((x0, y0), []).append((x1, y1))

    rows, cols = np.nonzero(mask)
    for r, c in zip(rows.tolist(), cols.tolist()):
        pr, pc = r + 1, c + 1
        if not padded[pr - 1, pc]:  # top side exposed
            add(c, r, c + 1, r)
        if not padded[pr, pc + 1]:  # right
            add(c + 1, r, c + 1, r + 1)
        if not padded[pr + 1, pc]:  # bottom
            add(c + 1, r + 1, c, r + 1)
        if not padded[pr, pc - 1]:  # left
            add(c, r + 1, c, r)

    rings_lattice: list[list[tuple[int, int]]] = []
    for start in sorted(edges):
        while edges.get(start):
            ring = [start]
            cur = edges[start].pop()
            prev = start
            while cur != start:
                ring.append(cur)
                outs = edges[cur]
                if len(outs) == 1:
                    nxt = outs.pop()
                else:
                    din = (cur[0] - prev[0], cur[1] - prev[1])
                    # pick the most clockwise turn (cross product -1)
                    pick = 0
                    for i, cand in enumerate(outs):
                        dout = (cand[0] - cur[0], cand[1] - cur[1])
                        if din[0] * dout[1] - din[1] * dout[0] < 0:
                            pick = i
                            break
                    nxt = outs.pop(pick)
                prev, cur = cur, nxt
            ring.append(start)
            rings_lattice.append(ring)

    out_rings = []
    for ring in rings_lattice:
        pts = np.asarray(ring, dtype=np.float64)
        pts = _drop_collinear(pts)
        xs = meta.origin_x + (pts[:, 0] + col0) * meta.pixel_size
        ys = meta.origin_y - (pts[:, 1] + row0) * meta.pixel_size
        out_rings.append((ring_signed_area_latt(ring), np.column_stack([xs, ys])))

    positives = [r for a, r in out_rings if a > 0]
    holes = tuple(r for a, r in out_rings if a <= 0)
    if len(positives) != 1:
        raise AssertionError(f"region traced to {len(positives)} exterior rings")
    return positives[0], holes


def ring_signed_area_latt(ring: list[tuple[int, int]]) -> float:
    pts = np.asarray(ring, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _drop_collinear(pts: np.ndarray) -> np.ndarray:
    """Merge runs of collinear axis-aligned unit steps; geometry unchanged."""
    keep = [0]
    n = pts.shape[0]
    for i in range(1, n - 1):
        d0 = pts[i] - pts[keep[-1]]
        d1 = pts[i + 1] - pts[i]
        if d0[0] * d1[1] - d0[1] * d1[0] != 0:
            keep.append(i)
    keep.append(n - 1)
    return pts[keep]


# ---------------------------------------------------------------------------
# rasterization and point queries (even-odd rule, pixel centers)
# ---------------------------------------------------------------------------


def _fill_rings(rings: list[np.ndarray], grid: GridMeta, out: np.ndarray) -> None:
    segs = []
    for ring in rings:
        a, b = ring[:-1], ring[1:]
        nonhoriz = a[:, 1] != b[:, 1]
        segs.append(np.column_stack([a[nonhoriz], b[nonhoriz]]))
    if not segs:
        return
    seg = np.concatenate(segs)  # columns: x1 y1 x2 y2
    if seg.size == 0:
        return
    x1, y1, x2, y2 = seg[:, 0], seg[:, 1], seg[:, 2], seg[:, 3]
    ylo, yhi = np.minimum(y1, y2), np.maximum(y1, y2)

    yc = grid.y_centers()
    xc = grid.x_centers()
    rmin = int(np.searchsorted(-yc, -float(yhi.max()), side="left"))
    rmax = int(np.searchsorted(-yc, -float(ylo.min()), side="right"))
    for r in range(max(rmin, 0), min(rmax, grid.height)):
        y = yc[r]
        hit = (ylo <= y) & (y < yhi)
        if not hit.any():
            continue
        t = (y - y1[hit]) / (y2[hit] - y1[hit])
        xs = np.sort(x1[hit] + t * (x2[hit] - x1[hit]))
        for i in range(0, xs.size - 1, 2):
            c0 = int(np.searchsorted(xc, xs[i], side="right"))
            c1 = int(np.searchsorted(xc, xs[i + 1], side="left"))
            if c1 > c0:
                out[r, c0:c1] = True


def rasterize(polygons: Iterable[Polygon], grid: GridMeta) -> np.ndarray:
    """Union coverage mask: a pixel is covered iff its center lies inside."""
    out = np.zeros(grid.shape, dtype=bool)
    for poly in polygons:
        cover = np.zeros(grid.shape, dtype=bool)
        _fill_rings(poly.rings(), grid, cover)
        out |= cover
    return out


def point_in_rings(x: float, y: float, rings) -> bool:
    """Even-odd containment test over all rings together (holes included)."""
    crossings = 0
    for ring in rings:
        ring = np.asarray(ring, dtype=np.float64)
        a, b = ring[:-1], ring[1:]
        y1, y2 = a[:, 1], b[:, 1]
        cond = (np.minimum(y1, y2) <= y) & (y < np.maximum(y1, y2))
        if not cond.any():
            continue
        t = (y - y1[cond]) / (y2[cond] - y1[cond])
        xs = a[cond, 0] + t * (b[cond, 0] - a[cond, 0])
        crossings += int(np.sum(xs > x))
    return crossings % 2 == 1


def _segment_distances(x: float, y: float, ring: np.ndarray) -> float:
    a, b = ring[:-1], ring[1:]
    d = b - a
    pa = np.array([x, y]) - a
    denom = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.divide(np.einsum("ij,ij->i", pa, d), denom,
                          out=np.zeros_like(denom), where=denom > 0), 0.0, 1.0)
    closest = a + t[:, None] * d
    dx = closest[:, 0] - x
    dy = closest[:, 1] - y
    return float(np.sqrt(np.min(dx * dx + dy * dy)))


def polygon_intersects_disc(poly: Polygon, cx: float, cy: float, radius: float) -> bool:
    """Exact polygon/disc intersection: containment or edge within radius."""
    xmin, ymin, xmax, ymax = poly.bounds()
    if (cx < xmin - radius or cx > xmax + radius
            or cy < ymin - radius or cy > ymax + radius):
        return False
    if point_in_rings(cx, cy, poly.rings()):
        return True
    return any(_segment_distances(cx, cy, ring) <= radius for ring in poly.rings())


# ---------------------------------------------------------------------------
# GeoJSON
# ---------------------------------------------------------------------------


def _oriented(ring: np.ndarray, positive: bool) -> list[list[float]]:
    area = ring_signed_area(ring)
    pts = ring if (area > 0) == positive else ring[::-1]
    return [[float(x), float(y)] for x, y in pts]


def write_geojson(polyset: PolygonSet, path: str | Path, crs: str | None = None) -> None:
    """Write a FeatureCollection; output bytes are deterministic."""
    features = []
    for poly in polyset:
        coords = [_oriented(poly.exterior, True)]
        coords.extend(_oriented(h, False) for h in poly.holes)
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": coords},
            "properties": {
                "year": poly.year,
                "area_m2": float(poly.area_m2),
                "source_tag": poly.source_tag,
            },
        })
    doc = {"type": "FeatureCollection", "features": features}
    if crs is not None:
        doc["crs_name"] = crs
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n",
                    encoding="utf-8")


def read_geojson(path: str | Path) -> PolygonSet:
    """Read Polygon/MultiPolygon features; parts of a MultiPolygon split."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a FeatureCollection")
    polys = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        year = props.get("year")
        tag = props.get("source_tag", "")
        gtype = geom.get("type")
        if gtype == "Polygon":
            parts = [geom["coordinates"]]
        elif gtype == "MultiPolygon":
            parts = geom["coordinates"]
        else:
            raise ValueError(f"{path}: unsupported geometry type {gtype!r}")
        for rings in parts:
            area = props.get("area_m2") if len(parts) == 1 else None
            polys.append(Polygon(
                exterior=np.asarray(rings[0], dtype=np.float64),
                holes=tuple(np.asarray(r, dtype=np.float64) for r in rings[1:]),
                year=int(year) if year is not None else None,
                area_m2=float(area) if area is not None else None,
                source_tag=str(tag),
            ))
    return PolygonSet(tuple(polys))


def stamp_year(polyset: PolygonSet, year: int) -> PolygonSet:
    return PolygonSet(tuple(replace(p, year=year) for p in polyset))
