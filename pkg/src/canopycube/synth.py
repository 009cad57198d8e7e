"""Synthetic height cubes with known stands, growth, disturbances, and shifts.

Every downstream stage gets an oracle from here: the clean cube, the true
per-year offsets, and the true disturbance polygons. The truth masks are
computed with deliberately plain re-implementations (shift-and-combine
morphology, breadth-first labelling) so they stay independent of the
production change-detection code paths.

Randomness is numpy's documented PCG64 generator. Two separate streams are
used: ``layout_seed`` drives stand geometry, base heights, and growth rates;
``seed`` drives only the observation noise. With ``noise_sigma = 0`` the
noise stream is never consulted, so the output does not depend on ``seed``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .polygons import Polygon, PolygonSet, trace_rings
from .raster import GridMeta, HeightCube

log = logging.getLogger(__name__)

MAX_SHIFT_PX = 2
BASE_HEIGHT_RANGE = (5.0, 35.0)


@dataclass(frozen=True)
class DisturbanceEvent:
    """A planted height drop: a filled disc or a rectangle of pixels.

    Rectangles are anchored so that (row, col) is the top-left pixel, which
    keeps even sizes unambiguous.
    """

    year: int
    row: int
    col: int
    drop_m: float
    radius_px: int | None = None
    rect: tuple[int, int] | None = None  # (rows, cols)

    def __post_init__(self):
        if (self.radius_px is None) == (self.rect is None):
            raise ValueError("specify exactly one of radius_px or rect")
        if self.drop_m < 0:
            raise ValueError("drop_m must be non-negative")
        if self.radius_px is not None and self.radius_px < 1:
            raise ValueError("radius_px must be at least 1")
        if self.rect is not None and (self.rect[0] < 1 or self.rect[1] < 1):
            raise ValueError("rect sides must be at least 1 pixel")

    def footprint(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        mask = np.zeros(shape, dtype=bool)
        if self.rect is not None:
            r1, c1 = self.row + self.rect[0], self.col + self.rect[1]
            if self.row < 0 or self.col < 0 or r1 > h or c1 > w:
                raise ValueError(f"event at ({self.row},{self.col}) leaves the grid")
            mask[self.row:r1, self.col:c1] = True
        else:
            rr, cc = np.ogrid[:h, :w]
            mask = (rr - self.row) ** 2 + (cc - self.col) ** 2 <= self.radius_px ** 2
            if (self.row - self.radius_px < 0 or self.col - self.radius_px < 0
                    or self.row + self.radius_px >= h or self.col + self.radius_px >= w):
                raise ValueError(f"event at ({self.row},{self.col}) leaves the grid")
        return mask


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_years: int = 5
    height: int = 64
    width: int = 64
    pixel_size: float = 1.5
    year_start: int = 2014
    n_stands: int = 12
    growth_range: tuple[float, float] = (0.1, 0.5)
    events: tuple[DisturbanceEvent, ...] = ()
    noise_sigma: float = 0.0
    shifts: tuple[tuple[int, int], ...] | None = None  # per year (dx, dy)
    base_heights: tuple[float, ...] | None = None  # overrides the random draw
    layout_seed: int = 1234
    origin: tuple[float, float] = (0.0, 0.0)
    crs: str = "synthetic"
    nodata: float = -9999.0

    def __post_init__(self):
        if self.n_years < 1:
            raise ValueError("n_years must be at least 1")
        if self.height < 1 or self.width < 1:
            raise ValueError("grid must be at least 1x1")
        if self.n_stands < 1:
            raise ValueError("n_stands must be at least 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.growth_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad growth_range {self.growth_range}")
        if self.shifts is not None:
            if len(self.shifts) != self.n_years:
                raise ValueError(
                    f"{len(self.shifts)} shifts for {self.n_years} years"
                )
            for dx, dy in self.shifts:
                if abs(dx) > MAX_SHIFT_PX or abs(dy) > MAX_SHIFT_PX:
                    raise ValueError(
                        f"shift ({dx},{dy}) exceeds +/-{MAX_SHIFT_PX} px"
                    )
        if self.base_heights is not None and len(self.base_heights) != self.n_stands:
            raise ValueError("base_heights must list one height per stand")
        if self.events:
            years = set(self.year_start + i for i in range(self.n_years))
            for ev in self.events:
                if ev.year not in years:
                    raise ValueError(f"event year {ev.year} outside the cube years")
                if ev.year == self.year_start:
                    raise ValueError("events in the first year have no before-state")

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(self.year_start + i for i in range(self.n_years))

    def grid(self) -> GridMeta:
        return GridMeta(
            origin_x=self.origin[0], origin_y=self.origin[1],
            pixel_size=self.pixel_size, width=self.width, height=self.height,
            crs=self.crs, nodata=self.nodata,
        )


@dataclass(frozen=True)
class SynthTruth:
    clean_cube: HeightCube
    noisy_cube: HeightCube
    true_offsets: tuple[tuple[int, int], ...]
    true_polygons: PolygonSet


# ---------------------------------------------------------------------------
# plain-route change machinery (kept independent of the delta module)
# ---------------------------------------------------------------------------


def opening_bruteforce(mask: np.ndarray, kernel_size: int = 3) -> np.ndarray:
    """Erosion then dilation by direct window simulation, edges = background."""
    if kernel_size == 1:
        return mask.copy()
    r = kernel_size // 2
    h, w = mask.shape
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    padded[r:-r, r:-r] = mask
    eroded = np.ones((h, w), dtype=bool)
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            eroded &= padded[r + dr:r + dr + h, r + dc:r + dc + w]
    padded[r:-r, r:-r] = eroded
    padded[:r] = padded[-r:] = False
    padded[:, :r] = padded[:, -r:] = False
    dilated = np.zeros((h, w), dtype=bool)
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            dilated |= padded[r + dr:r + dr + h, r + dc:r + dc + w]
    return dilated


def label_bruteforce(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected flood fill, labels by first pixel in row-major order."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    n = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and labels[r, c] == 0:
                n += 1
                stack = [(r, c)]
                labels[r, c] = n
                while stack:
                    rr, cc = stack.pop()
                    for nr in (rr - 1, rr, rr + 1):
                        if nr < 0 or nr >= h:
                            continue
                        for nc in (cc - 1, cc, cc + 1):
                            if 0 <= nc < w and mask[nr, nc] and labels[nr, nc] == 0:
                                labels[nr, nc] = n
                                stack.append((nr, nc))
    return labels, n


def _truth_polygons(clean: np.ndarray, cfg: SynthConfig,
                    threshold_m: float, kernel_size: int,
                    min_area_m2: float) -> PolygonSet:
    meta = cfg.grid()
    px_area = float(cfg.pixel_size) ** 2
    polys = []
    for t in range(cfg.n_years - 1):
        year = cfg.years[t + 1]
        drop = clean[t] - clean[t + 1]
        mask = opening_bruteforce(drop >= np.float32(threshold_m), kernel_size)
        labels, n = label_bruteforce(mask)
        for lab in range(1, n + 1):
            region = labels == lab
            count = int(region.sum())
            area = count * px_area
            if area < min_area_m2:
                continue
            rows, cols = np.nonzero(region)
            r0, r1 = rows.min(), rows.max() + 1
            c0, c1 = cols.min(), cols.max() + 1
            exterior, holes = trace_rings(region[r0:r1, c0:c1], meta, row0=r0, col0=c0)
            polys.append(Polygon(
                exterior=exterior, holes=holes, year=year, area_m2=area,
                source_tag="truth", pixel_count=count, region_label=lab,
            ))
    return PolygonSet(tuple(polys))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def shift_replicate(layer: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate content by (+dx, +dy) pixels, replicating the trailing edge."""
    h, w = layer.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return layer[np.ix_(rows, cols)]


def generate(cfg: SynthConfig, truth_threshold_m: float = 5.0,
             truth_kernel: int = 3, truth_min_area_m2: float = 10.0) -> SynthTruth:
    """Build a SynthTruth. Identical configs give bit-identical output."""
    layout = np.random.default_rng(cfg.layout_seed)
    sites = layout.uniform(0.0, 1.0, size=(cfg.n_stands, 2))
    sites *= np.array([[cfg.height, cfg.width]])
    if cfg.base_heights is not None:
        base = np.asarray(cfg.base_heights, dtype=np.float64)
    else:
        base = layout.uniform(*BASE_HEIGHT_RANGE, size=cfg.n_stands)
    growth = layout.uniform(cfg.growth_range[0], cfg.growth_range[1],
                            size=cfg.n_stands)

    rr, cc = np.mgrid[0:cfg.height, 0:cfg.width]
    d2 = ((rr[..., None] + 0.5 - sites[:, 0]) ** 2
          + (cc[..., None] + 0.5 - sites[:, 1]) ** 2)
    stand = np.argmin(d2, axis=-1)

    shape = (cfg.height, cfg.width)
    clean = np.empty((cfg.n_years, *shape), dtype=np.float32)
    layer = base[stand]
    clean[0] = np.clip(layer, 0.0, 100.0)
    for t in range(1, cfg.n_years):
        layer = layer + growth[stand]
        for ev in cfg.events:
            if ev.year == cfg.years[t]:
                fp = ev.footprint(shape)
                layer = np.where(fp, np.maximum(layer - ev.drop_m, 0.0), layer)
        clean[t] = np.clip(layer, 0.0, 100.0)

    shifts = cfg.shifts if cfg.shifts is not None else ((0, 0),) * cfg.n_years
    noise = np.random.default_rng(cfg.seed)
    noisy = np.empty_like(clean)
    for t, (dx, dy) in enumerate(shifts):
        moved = shift_replicate(clean[t], dx, dy).astype(np.float64)
        if cfg.noise_sigma > 0:
            moved = moved + noise.normal(0.0, cfg.noise_sigma, size=shape)
        noisy[t] = np.clip(moved, 0.0, 100.0).astype(np.float32)

    meta = cfg.grid()
    truth = SynthTruth(
        clean_cube=HeightCube(meta, cfg.years, clean),
        noisy_cube=HeightCube(meta, cfg.years, noisy),
        true_offsets=tuple((int(dx), int(dy)) for dx, dy in shifts),
        true_polygons=_truth_polygons(clean, cfg, truth_threshold_m,
                                      truth_kernel, truth_min_area_m2),
    )
    log.info("synth cube %dx%dx%d: %d true polygons",
             cfg.n_years, cfg.height, cfg.width, len(truth.true_polygons))
    return truth


def write_true_offsets_csv(truth: SynthTruth, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["year", "dx", "dy"])
        for year, (dx, dy) in zip(truth.clean_cube.years, truth.true_offsets):
            out.writerow([year, dx, dy])
