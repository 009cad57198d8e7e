"""Inter-year co-registration by exhaustive integer offset search.

Every non-reference layer is searched patch by patch for the integer offset
in [-r, r]^2 that minimizes the mean squared height difference against the
reference layer over the valid overlap. The patch content is then resampled
at that offset; where shifted patches overlap, their values are averaged.

Offsets follow the sampling convention aligned(r, c) = moving(r + dy, c + dx):
a scene translated by (+dx, +dy) pixels is recovered as offset (dx, dy).
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import GridMeta, HeightCube, HeightRaster, require_compatible

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OffsetSearchConfig:
    window_radius: int = 2
    reference_index: int | None = None  # None selects the middle layer
    patch_size: int = 2000
    patch_overlap: int = 64

    def __post_init__(self):
        if self.window_radius < 0:
            raise ValueError("window_radius must be non-negative")
        if self.patch_overlap < 2 * self.window_radius:
            raise ValueError(
                f"patch_overlap={self.patch_overlap} must be at least twice "
                f"window_radius={self.window_radius} so shifted patches stay covered"
            )
        if self.patch_size <= 2 * self.patch_overlap:
            raise ValueError(
                f"patch_size={self.patch_size} must exceed twice "
                f"patch_overlap={self.patch_overlap}"
            )


@dataclass(frozen=True)
class PatchOffset:
    year: int
    x0: int
    y0: int
    x1: int
    y1: int
    dx: int
    dy: int
    score: float


@dataclass(frozen=True)
class OffsetField:
    records: tuple[PatchOffset, ...] = ()

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def for_year(self, year: int) -> tuple[PatchOffset, ...]:
        return tuple(r for r in self.records if r.year == year)


def write_offsets_csv(field: OffsetField, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["year", "patch_x0", "patch_y0", "dx", "dy", "score"])
        for r in field.records:
            out.writerow([r.year, r.x0, r.y0, r.dx, r.dy, repr(r.score)])


# ---------------------------------------------------------------------------
# offset search
# ---------------------------------------------------------------------------


def _search_offset(moving: np.ndarray, reference: np.ndarray,
                   valid_m: np.ndarray, valid_r: np.ndarray,
                   radius: int) -> tuple[int, int, float]:
    """Argmin of mean squared difference over integer offsets in [-r, r]^2.

    Ties break toward the smallest |dx| + |dy|, then row-major scan order
    (dy outer, dx inner, both ascending).
    """
    h, w = moving.shape
    best: tuple[float, int, int, int, int] | None = None
    scan = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            r0, r1 = max(0, -dy), h - max(0, dy)
            c0, c1 = max(0, -dx), w - max(0, dx)
            if r1 <= r0 or c1 <= c0:
                scan += 1
                continue
            a = moving[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
            b = reference[r0:r1, c0:c1]
            ok = valid_m[r0 + dy:r1 + dy, c0 + dx:c1 + dx] & valid_r[r0:r1, c0:c1]
            n = int(ok.sum())
            if n > 0:
                d = (a - b)[ok].astype(np.float64)
                score = float(np.dot(d, d)) / n
                key = (score, abs(dx) + abs(dy), scan, dx, dy)
                if best is None or key < best:
                    best = key
            scan += 1
    if best is None:
        raise ValueError("no offset has any valid overlap between the layers")
    return best[3], best[4], best[0]


def best_offset(moving: HeightRaster, reference: HeightRaster,
                window_radius: int = 2) -> tuple[int, int, float]:
    """Whole-raster offset search. Returns (dx, dy, score)."""
    require_compatible(moving.meta, reference.meta)
    return _search_offset(
        moving.values, reference.values,
        moving.finite_mask(), reference.finite_mask(),
        window_radius,
    )


# ---------------------------------------------------------------------------
# patch tiling and cube registration
# ---------------------------------------------------------------------------


def _patch_spans(extent: int, patch: int, overlap: int) -> list[tuple[int, int]]:
    if extent <= patch:
        return [(0, extent)]
    stride = patch - overlap
    spans = []
    start = 0
    while True:
        if start + patch >= extent:
            spans.append((extent - patch, extent))
            break
        spans.append((start, start + patch))
        start += stride
    return spans


def patch_grid(meta: GridMeta, cfg: OffsetSearchConfig) -> list[tuple[int, int, int, int]]:
    """Patch windows as (y0, y1, x0, x1), row-major."""
    rows = _patch_spans(meta.height, cfg.patch_size, cfg.patch_overlap)
    cols = _patch_spans(meta.width, cfg.patch_size, cfg.patch_overlap)
    return [(y0, y1, x0, x1) for y0, y1 in rows for x0, x1 in cols]


def coregister_cube(cube: HeightCube, cfg: OffsetSearchConfig = OffsetSearchConfig(),
                    workers: int = 1) -> tuple[HeightCube, OffsetField]:
    """Align every layer to the reference layer; the reference is copied as-is.

    Pixels that end up outside every shifted patch become nodata rather than
    being filled with fabricated heights.
    """
    ref_idx = cfg.reference_index if cfg.reference_index is not None else cube.n_years // 2
    if not 0 <= ref_idx < cube.n_years:
        raise ValueError(f"reference index {ref_idx} outside 0..{cube.n_years - 1}")

    patches = patch_grid(cube.meta, cfg)
    nodata = np.float32(cube.meta.nodata)
    reference = cube.values[ref_idx]
    ref_valid = reference != nodata
    out = np.empty_like(cube.values)
    records: list[PatchOffset] = []

    for t in range(cube.n_years):
        if t == ref_idx:
            out[t] = cube.values[t]
            continue
        t0 = time.perf_counter()
        moving = cube.values[t]
        mov_valid = moving != nodata

        def search(win):
            y0, y1, x0, x1 = win
            return _search_offset(
                moving[y0:y1, x0:x1], reference[y0:y1, x0:x1],
                mov_valid[y0:y1, x0:x1], ref_valid[y0:y1, x0:x1],
                cfg.window_radius,
            )
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                found = list(pool.map(search, patches))
        else:
            found = [search(win) for win in patches]

        h, w = cube.meta.shape
        acc = np.zeros((h, w), dtype=np.float64)
        cnt = np.zeros((h, w), dtype=np.int64)
        for (y0, y1, x0, x1), (dx, dy, score) in zip(patches, found):
            records.append(PatchOffset(cube.years[t], x0, y0, x1, y1, dx, dy, score))
            # patch content lands at its own window minus the offset
            r0, r1 = max(0, y0 - dy), min(h, y1 - dy)
            c0, c1 = max(0, x0 - dx), min(w, x1 - dx)
            if r1 <= r0 or c1 <= c0:
                continue
            src = moving[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
            ok = src != nodata
            acc[r0:r1, c0:c1] += np.where(ok, src, 0.0)
            cnt[r0:r1, c0:c1] += ok
        covered = cnt > 0
        layer = np.full((h, w), nodata, dtype=np.float32)
        layer[covered] = (acc[covered] / cnt[covered]).astype(np.float32)
        out[t] = layer
        log.info("coregister year=%d patches=%d %.2fs",
                 cube.years[t], len(patches), time.perf_counter() - t0)

    registered = HeightCube(cube.meta, cube.years, out)
    return registered, OffsetField(tuple(records))
