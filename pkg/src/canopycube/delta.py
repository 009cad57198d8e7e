"""Disturbance extraction: threshold height loss, clean up, polygonize.

For each consecutive year pair the pipeline is
    loss mask (drop >= threshold, both years known)
    -> binary opening (erosion then dilation, square kernel)
    -> 8-connected labelling (labels ordered by first row-major pixel)
    -> polygons tracing exact pixel edges, area = pixel_count * pixel_size^2
    -> drop areas below the minimum, then drop polygons mostly outside the
       forest mask (when one is configured)
Polygons are stamped with the later year of the pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .polygons import Polygon, PolygonSet, rasterize, trace_rings
from .raster import DisturbanceMask, GridMeta, HeightCube, HeightRaster, require_compatible

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeltaConfig:
    loss_threshold_m: float = 5.0
    kernel_size: int = 3
    min_area_m2: float = 10.0
    forest_mask: object | None = None  # HeightRaster, PolygonSet, or bool array

    def __post_init__(self):
        if not self.loss_threshold_m > 0:
            raise ValueError("loss_threshold_m must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.min_area_m2 < 0:
            raise ValueError("min_area_m2 must be non-negative")


@dataclass(frozen=True)
class LabeledRegions:
    """8-connected components of a mask; counts[k] is region k's pixel count."""

    meta: GridMeta
    labels: np.ndarray  # int32, 0 = background
    counts: np.ndarray  # int64, index 0 unused
    year: int | None = None

    @property
    def n_regions(self) -> int:
        return len(self.counts) - 1


def height_loss_mask(before: HeightRaster, after: HeightRaster,
                     threshold_m: float = 5.0, year: int | None = None
                     ) -> DisturbanceMask:
    """Pixels that lost at least ``threshold_m`` of height between two dates.

    Pixels with nodata in either raster never count as loss.
    """
    require_compatible(before.meta, after.meta)
    if not threshold_m > 0:
        raise ValueError("threshold_m must be positive")
    ok = before.finite_mask() & after.finite_mask()
    bits = ok & (before.values - after.values >= np.float32(threshold_m))
    return DisturbanceMask(before.meta, bits, year=year)


def opening(mask: DisturbanceMask, kernel_size: int = 3) -> DisturbanceMask:
    """Binary opening with a square kernel; outside the grid is background."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if kernel_size == 1:
        return mask
    structure = np.ones((kernel_size, kernel_size), dtype=bool)
    eroded = ndimage.binary_erosion(mask.bits, structure=structure, border_value=0)
    opened = ndimage.binary_dilation(eroded, structure=structure, border_value=0)
    return DisturbanceMask(mask.meta, opened, year=mask.year)


def label_regions(mask: DisturbanceMask) -> LabeledRegions:
    """8-connected components, labelled 1..n by first pixel in row-major order."""
    raw, n = ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=int))
    labels = raw.astype(np.int32)
    if n > 0:
        flat = labels.ravel()
        first = np.full(n + 1, flat.size, dtype=np.int64)
        idx = np.flatnonzero(flat)
        # reversed so the earliest occurrence wins the final write
        first[flat[idx[::-1]]] = idx[::-1]
        order = np.argsort(first[1:], kind="stable") + 1
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[order] = np.arange(1, n + 1, dtype=np.int32)
        labels = remap[labels]
    counts = np.bincount(labels.ravel(), minlength=n + 1).astype(np.int64)
    counts[0] = 0
    return LabeledRegions(mask.meta, labels, counts, year=mask.year)


def polygonize(regions: LabeledRegions, min_area_m2: float = 10.0) -> PolygonSet:
    """One polygon per region with area >= ``min_area_m2``.

    Area comes from the pixel count; the traced rings are checked against it
    at construction time.
    """
    meta = regions.meta
    px_area = float(meta.pixel_size) ** 2
    slices = ndimage.find_objects(regions.labels)
    polys = []
    for label in range(1, regions.n_regions + 1):
        count = int(regions.counts[label])
        area = count * px_area
        if area < min_area_m2:
            continue
        window = slices[label - 1]
        sub = regions.labels[window] == label
        exterior, holes = trace_rings(sub, meta, row0=window[0].start, col0=window[1].start)
        polys.append(Polygon(
            exterior=exterior,
            holes=holes,
            year=regions.year,
            area_m2=area,
            source_tag="delta",
            pixel_count=count,
            region_label=label,
        ))
    return PolygonSet(tuple(polys))


def _forest_bits(forest_mask, meta: GridMeta) -> np.ndarray:
    if isinstance(forest_mask, np.ndarray):
        if forest_mask.shape != meta.shape:
            raise ValueError("forest mask array does not match the grid")
        return forest_mask.astype(bool)
    if isinstance(forest_mask, HeightRaster):
        require_compatible(forest_mask.meta, meta, "forest mask and cube")
        return forest_mask.finite_mask() & (forest_mask.values > 0)
    if isinstance(forest_mask, PolygonSet):
        return rasterize(forest_mask, meta)
    raise TypeError(f"unsupported forest mask type {type(forest_mask).__name__}")


def cube_to_polygons(cube: HeightCube, cfg: DeltaConfig = DeltaConfig()) -> PolygonSet:
    """Extract disturbance polygons from every consecutive layer pair."""
    if cube.n_years < 2:
        raise ValueError("need at least two years to detect change")
    forest = None
    if cfg.forest_mask is not None:
        forest = _forest_bits(cfg.forest_mask, cube.meta)

    out: list[Polygon] = []
    for t in range(cube.n_years - 1):
        year = cube.years[t + 1]
        mask = height_loss_mask(cube.layer(t), cube.layer(t + 1),
                                cfg.loss_threshold_m, year=year)
        regions = label_regions(opening(mask, cfg.kernel_size))
        polys = polygonize(regions, cfg.min_area_m2)
        if forest is not None and len(polys):
            in_forest = np.bincount(
                regions.labels.ravel(),
                weights=forest.ravel().astype(np.float64),
                minlength=regions.n_regions + 1,
            )
            kept = []
            for poly in polys:
                frac = in_forest[poly.region_label] / regions.counts[poly.region_label]
                if frac >= 0.5:
                    kept.append(poly)
            polys = PolygonSet(tuple(kept))
        out.extend(polys)
        log.info("delta %d->%d: %d loss px, %d polygons",
                 cube.years[t], year, mask.count(), len(polys))
    return PolygonSet(tuple(out))
