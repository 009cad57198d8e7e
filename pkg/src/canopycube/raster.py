"""Grid metadata, height rasters, height cubes, and the raw-f32 file format.

A raster on disk is a pair of files sharing a stem: ``<stem>.f32`` holds
row-major little-endian float32 samples (top row first), ``<stem>.hdr`` is a
UTF-8 text file of ``key=value`` lines. Nodata pixels carry the sentinel
value from the header verbatim, so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_NODATA = -9999.0
#: Heights above this are physically implausible and read back as nodata.
MAX_HEIGHT_M = 100.0

_HEADER_KEYS = ("width", "height", "pixel_size", "origin_x", "origin_y", "crs", "nodata")


class RasterFormatError(ValueError):
    """Raised when a raster file pair cannot be parsed or is inconsistent."""


# ---------------------------------------------------------------------------
# grid metadata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridMeta:
    """Georeferencing for a raster: top-left corner, square pixels, y down."""

    origin_x: float
    origin_y: float
    pixel_size: float
    width: int
    height: int
    crs: str = "local"
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not (np.isfinite(self.pixel_size) and self.pixel_size > 0):
            raise ValueError(f"pixel_size must be positive and finite, got {self.pixel_size}")
        if not (np.isfinite(self.origin_x) and np.isfinite(self.origin_y)):
            raise ValueError("grid origin must be finite")
        if not np.isfinite(self.nodata):
            raise ValueError("nodata sentinel must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def compatible_with(self, other: "GridMeta") -> bool:
        """True when the two grids share extent, resolution, and CRS.

        The nodata sentinel is intentionally excluded; it is a storage
        convention, not a property of the grid.
        """
        return (
            self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
            and self.pixel_size == other.pixel_size
            and self.width == other.width
            and self.height == other.height
            and self.crs == other.crs
        )

    def x_centers(self) -> np.ndarray:
        return self.origin_x + (np.arange(self.width) + 0.5) * self.pixel_size

    def y_centers(self) -> np.ndarray:
        return self.origin_y - (np.arange(self.height) + 0.5) * self.pixel_size


def require_compatible(a: GridMeta, b: GridMeta, what: str = "rasters") -> None:
    if not a.compatible_with(b):
        raise ValueError(f"{what} are on incompatible grids: {a} vs {b}")


# ---------------------------------------------------------------------------
# in-memory types
# ---------------------------------------------------------------------------


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _check_heights(values: np.ndarray, nodata: float, what: str) -> None:
    data = values[values != nodata]
    if data.size == 0:
        return
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite heights")
    lo, hi = float(data.min()), float(data.max())
    if lo < 0.0:
        raise ValueError(f"{what} contains negative heights (min {lo})")
    if hi > MAX_HEIGHT_M:
        raise ValueError(f"{what} contains heights above {MAX_HEIGHT_M} m (max {hi})")


@dataclass(frozen=True)
class HeightRaster:
    """A single-date canopy height model on a grid, float32, nodata sentinel."""

    meta: GridMeta
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.shape != self.meta.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.meta.shape}")
        _check_heights(vals, self.meta.nodata, "raster")
        object.__setattr__(self, "values", _freeze(vals))

    def finite_mask(self) -> np.ndarray:
        """Boolean mask of pixels that carry an actual height."""
        return self.values != np.float32(self.meta.nodata)


@dataclass(frozen=True)
class HeightCube:
    """A stack of co-gridded height rasters for strictly increasing years."""

    meta: GridMeta
    years: tuple[int, ...]
    values: np.ndarray  # (T, H, W) float32

    def __post_init__(self):
        years = tuple(int(y) for y in self.years)
        if len(years) == 0:
            raise ValueError("a cube needs at least one year")
        if any(b <= a for a, b in zip(years, years[1:])):
            raise ValueError(f"years must be strictly increasing, got {years}")
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.shape != (len(years), *self.meta.shape):
            raise ValueError(
                f"values shape {vals.shape} does not match ({len(years)}, *{self.meta.shape})"
            )
        _check_heights(vals, self.meta.nodata, "cube")
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "values", _freeze(vals))

    @property
    def n_years(self) -> int:
        return len(self.years)

    def layer(self, index: int) -> HeightRaster:
        """The raster for one time index; shares memory with the cube."""
        return HeightRaster(self.meta, self.values[index])

    def index_for_year(self, year: int) -> int:
        try:
            return self.years.index(year)
        except ValueError:
            raise KeyError(f"cube has no layer for year {year} (years: {self.years})") from None

    def finite_mask(self) -> np.ndarray:
        return self.values != np.float32(self.meta.nodata)


@dataclass(frozen=True)
class DisturbanceMask:
    """Boolean per-pixel change mask, optionally stamped with a year."""

    meta: GridMeta
    bits: np.ndarray
    year: int | None = None

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.shape != self.meta.shape:
            raise ValueError(f"mask shape {bits.shape} does not match grid {self.meta.shape}")
        object.__setattr__(self, "bits", _freeze(bits))

    def count(self) -> int:
        return int(self.bits.sum())


def stack(rasters: list[HeightRaster], years: list[int]) -> HeightCube:
    """Stack per-year rasters into a cube. Grids must match exactly."""
    if len(rasters) != len(years):
        raise ValueError(f"{len(rasters)} rasters but {len(years)} years")
    if not rasters:
        raise ValueError("nothing to stack")
    meta = rasters[0].meta
    for r in rasters[1:]:
        require_compatible(meta, r.meta)
    order = np.argsort(years, kind="stable")
    vals = np.stack([rasters[i].values for i in order])
    return HeightCube(meta, tuple(int(years[i]) for i in order), vals)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _stem(path: str | Path) -> Path:
    p = Path(path)
    if p.suffix in (".f32", ".hdr"):
        return p.with_suffix("")
    return p


def write_raster(raster: HeightRaster, path: str | Path, year: int | None = None) -> None:
    """Write the ``.f32``/``.hdr`` pair for ``raster`` at ``path`` (stem or file)."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    m = raster.meta
    lines = [
        f"width={m.width}",
        f"height={m.height}",
        f"pixel_size={m.pixel_size!r}",
        f"origin_x={m.origin_x!r}",
        f"origin_y={m.origin_y!r}",
        f"crs={m.crs}",
        f"nodata={m.nodata!r}",
    ]
    if year is not None:
        lines.append(f"year={int(year)}")
    stem.with_suffix(".hdr").write_text("\n".join(lines) + "\n", encoding="utf-8")
    stem.with_suffix(".f32").write_bytes(raster.values.astype("<f4").tobytes(order="C"))


def read_header(path: str | Path) -> dict[str, str]:
    stem = _stem(path)
    hdr_path = stem.with_suffix(".hdr")
    if not hdr_path.exists():
        raise RasterFormatError(f"missing header file {hdr_path}")
    fields: dict[str, str] = {}
    for ln, line in enumerate(hdr_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise RasterFormatError(f"{hdr_path}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise RasterFormatError(f"{hdr_path}: missing keys: {', '.join(missing)}")
    return fields


def _meta_from_header(fields: dict[str, str], where: Path) -> GridMeta:
    try:
        return GridMeta(
            origin_x=float(fields["origin_x"]),
            origin_y=float(fields["origin_y"]),
            pixel_size=float(fields["pixel_size"]),
            width=int(fields["width"]),
            height=int(fields["height"]),
            crs=fields["crs"],
            nodata=float(fields["nodata"]),
        )
    except ValueError as exc:
        raise RasterFormatError(f"{where}: bad header value: {exc}") from exc


def read_raster(path: str | Path) -> HeightRaster:
    """Read a ``.f32``/``.hdr`` pair.

    Heights are clamped into [0, 100] m on the way in: negatives become 0,
    values above 100 m become nodata. Non-finite payloads are rejected.
    """
    stem = _stem(path)
    fields = read_header(stem)
    meta = _meta_from_header(fields, stem.with_suffix(".hdr"))
    f32_path = stem.with_suffix(".f32")
    if not f32_path.exists():
        raise RasterFormatError(f"missing payload file {f32_path}")
    raw = f32_path.read_bytes()
    expected = meta.width * meta.height * 4
    if len(raw) != expected:
        raise RasterFormatError(
            f"{f32_path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(meta.shape).copy()
    nodata = np.float32(meta.nodata)
    known = values != nodata
    if not np.all(np.isfinite(values[known])):
        raise RasterFormatError(f"{f32_path}: non-finite heights in payload")
    np.maximum(values, 0.0, out=values, where=known)
    values[known & (values > MAX_HEIGHT_M)] = nodata
    return HeightRaster(meta, values)


def read_raster_year(path: str | Path) -> int | None:
    fields = read_header(path)
    return int(fields["year"]) if "year" in fields else None


# ---------------------------------------------------------------------------
# cube directories (one raster pair per year, year recorded in the header)
# ---------------------------------------------------------------------------


def write_cube(cube: HeightCube, directory: str | Path) -> list[Path]:
    """Write one ``year_<YYYY>`` raster pair per layer. Returns written stems."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stems = []
    for i, year in enumerate(cube.years):
        stem = directory / f"year_{year}"
        write_raster(cube.layer(i), stem, year=year)
        stems.append(stem)
    return stems


def read_cube(directory: str | Path) -> HeightCube:
    directory = Path(directory)
    headers = sorted(directory.glob("year_*.hdr"))
    if not headers:
        raise RasterFormatError(f"no year_*.hdr rasters found in {directory}")
    rasters, years = [], []
    for hdr in headers:
        year = read_raster_year(hdr)
        if year is None:
            raise RasterFormatError(f"{hdr}: cube layers need a year= header line")
        rasters.append(read_raster(hdr))
        years.append(year)
    return stack(rasters, years)
