"""Flat key=value run configuration with dotted prefixes.

Example::

    input.cube_dir = data/cube
    tv.lambda_temp = 5
    tv.lambda_spat = 0.5
    delta.loss_threshold = 5
    # comments and blank lines are fine

Validation never stops at the first problem; every violation is collected so
a bad file is fixed in one round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .coregister import OffsetSearchConfig
from .delta import DeltaConfig
from .metrics import SizeBins
from .synth import DisturbanceEvent, SynthConfig
from .tv import TvConfig


class ConfigError(ValueError):
    """One or more configuration problems; ``problems`` lists them all."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    path = Path(path)
    problems = []
    out: dict[str, str] = {}
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            problems.append(f"{path}:{ln}: empty key")
            continue
        if key in out:
            problems.append(f"{path}:{ln}: duplicate key {key!r}")
            continue
        out[key] = value
    if problems:
        raise ConfigError(problems)
    return out


@dataclass
class PipelineConfig:
    input_cube_dir: Path
    out_dir: Path
    workers: int = 1
    tile_size: int = 512
    offsets: OffsetSearchConfig = field(default_factory=OffsetSearchConfig)
    tv: TvConfig = field(default_factory=TvConfig)
    delta: DeltaConfig = field(default_factory=DeltaConfig)
    forest_mask_path: Path | None = None
    reference_polygons_path: Path | None = None
    plots_csv_path: Path | None = None
    plot_period: tuple[int, int] | None = None
    size_bins: SizeBins = field(default_factory=SizeBins)
    height_radius_m: float = 18.0
    skip_denoise: bool = False


class _Reader:
    """Typed accessors over the raw mapping; collects problems as it goes."""

    def __init__(self, raw: dict[str, str]):
        self.raw = dict(raw)
        self.seen: set[str] = set()
        self.problems: list[str] = []

    def _get(self, key: str):
        self.seen.add(key)
        return self.raw.get(key)

    def str_(self, key: str, default: str | None = None) -> str | None:
        v = self._get(key)
        return default if v is None else v

    def int_(self, key: str, default: int | None = None) -> int | None:
        v = self._get(key)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            self.problems.append(f"{key}: expected an integer, got {v!r}")
            return default

    def float_(self, key: str, default: float | None = None) -> float | None:
        v = self._get(key)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            self.problems.append(f"{key}: expected a number, got {v!r}")
            return default

    def bool_(self, key: str, default: bool = False) -> bool:
        v = self._get(key)
        if v is None:
            return default
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        self.problems.append(f"{key}: expected a boolean, got {v!r}")
        return default

    def path_(self, key: str, must_exist: bool = False) -> Path | None:
        v = self._get(key)
        if v is None:
            return None
        p = Path(v)
        if must_exist and not p.exists():
            self.problems.append(f"{key}: path does not exist: {p}")
        return p

    def unknown_keys(self, prefixes: tuple[str, ...]) -> list[str]:
        known = {k for k in self.raw if k in self.seen}
        out = []
        for k in self.raw:
            if k in known:
                continue
            if any(k.startswith(p) for p in prefixes):
                out.append(k)
        return out


def _build_dataclass(reader: _Reader, builder, what: str):
    try:
        return builder()
    except ValueError as exc:
        reader.problems.append(f"{what}: {exc}")
        return None


def pipeline_config_from_mapping(raw: dict[str, str]) -> PipelineConfig:
    """Build and validate a PipelineConfig; raises ConfigError with all problems."""
    r = _Reader(raw)

    cube_dir = r.path_("input.cube_dir", must_exist=True)
    if cube_dir is None:
        r.problems.append("input.cube_dir: required")
    out_dir = r.path_("output.dir")
    if out_dir is None:
        r.problems.append("output.dir: required (or pass --out)")

    workers = r.int_("run.workers", 1)
    tile_size = r.int_("run.tile_size", 512)
    if workers is not None and workers < 1:
        r.problems.append(f"run.workers: must be >= 1, got {workers}")
    if tile_size is not None and tile_size < 16:
        r.problems.append(f"run.tile_size: must be >= 16, got {tile_size}")

    ref_idx_raw = r.str_("coregister.reference_index")
    ref_idx: int | None
    if ref_idx_raw in (None, "", "middle"):
        ref_idx = None
    else:
        try:
            ref_idx = int(ref_idx_raw)
        except ValueError:
            r.problems.append(
                f"coregister.reference_index: expected an integer or 'middle', "
                f"got {ref_idx_raw!r}")
            ref_idx = None

    offsets = _build_dataclass(r, lambda: OffsetSearchConfig(
        window_radius=r.int_("coregister.window_radius", 2),
        reference_index=ref_idx,
        patch_size=r.int_("coregister.patch_size", 2000),
        patch_overlap=r.int_("coregister.patch_overlap", 64),
    ), "coregister")

    tv = _build_dataclass(r, lambda: TvConfig(
        lambda_temp=r.float_("tv.lambda_temp", 5.0),
        lambda_spat=r.float_("tv.lambda_spat", 0.5),
        max_iters=r.int_("tv.max_iters", 500),
        rel_tol=r.float_("tv.rel_tol", 1e-4),
        log_every=r.int_("tv.log_every", 25),
    ), "tv")

    delta = _build_dataclass(r, lambda: DeltaConfig(
        loss_threshold_m=r.float_("delta.loss_threshold", 5.0),
        kernel_size=r.int_("delta.kernel_size", 3),
        min_area_m2=r.float_("delta.min_area_m2", 10.0),
    ), "delta")

    forest_mask = r.path_("delta.forest_mask", must_exist=True)
    ref_polys = r.path_("metrics.reference_polygons", must_exist=True)
    plots_csv = r.path_("metrics.plots_csv", must_exist=True)

    lo = r.int_("metrics.plot_year_lo")
    hi = r.int_("metrics.plot_year_hi")
    period: tuple[int, int] | None = None
    if (lo is None) != (hi is None):
        r.problems.append("metrics.plot_year_lo/hi: set both or neither")
    elif lo is not None and hi is not None:
        if hi <= lo:
            r.problems.append(f"metrics.plot_year_lo/hi: empty period ({lo}, {hi}]")
        else:
            period = (lo, hi)

    bins_raw = r.str_("metrics.size_bins")
    bins = SizeBins()
    if bins_raw:
        try:
            bins = SizeBins(tuple(float(s) for s in bins_raw.split(",")))
        except ValueError as exc:
            r.problems.append(f"metrics.size_bins: {exc}")

    radius = r.float_("metrics.height_radius_m", 18.0)
    if radius is not None and radius <= 0:
        r.problems.append(f"metrics.height_radius_m: must be positive, got {radius}")

    skip_denoise = r.bool_("tv.skip", False)

    for key in r.unknown_keys(("input.", "output.", "run.", "coregister.",
                               "tv.", "delta.", "metrics.")):
        r.problems.append(f"{key}: unknown key")

    if r.problems:
        raise ConfigError(r.problems)
    return PipelineConfig(
        input_cube_dir=cube_dir, out_dir=out_dir, workers=workers,
        tile_size=tile_size, offsets=offsets, tv=tv, delta=delta,
        forest_mask_path=forest_mask, reference_polygons_path=ref_polys,
        plots_csv_path=plots_csv, plot_period=period, size_bins=bins,
        height_radius_m=radius, skip_denoise=skip_denoise,
    )


# ---------------------------------------------------------------------------
# synthetic-scene configuration (for the simulate subcommand)
# ---------------------------------------------------------------------------


def _parse_events(text: str) -> tuple[DisturbanceEvent, ...]:
    """Events: 'year,row,col,rect,rows,cols,drop' or 'year,row,col,circle,radius,drop'
    separated by ';'."""
    events = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        parts = [s.strip() for s in item.split(",")]
        if len(parts) < 4:
            raise ValueError(f"event too short: {item!r}")
        year, row, col, shape = int(parts[0]), int(parts[1]), int(parts[2]), parts[3]
        if shape == "rect":
            if len(parts) != 7:
                raise ValueError(f"rect event needs 7 fields: {item!r}")
            events.append(DisturbanceEvent(year=year, row=row, col=col,
                                           rect=(int(parts[4]), int(parts[5])),
                                           drop_m=float(parts[6])))
        elif shape == "circle":
            if len(parts) != 6:
                raise ValueError(f"circle event needs 6 fields: {item!r}")
            events.append(DisturbanceEvent(year=year, row=row, col=col,
                                           radius_px=int(parts[4]),
                                           drop_m=float(parts[5])))
        else:
            raise ValueError(f"unknown event shape {shape!r} in {item!r}")
    return tuple(events)


def _parse_shifts(text: str) -> tuple[tuple[int, int], ...]:
    shifts = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        dx, dy = (int(s) for s in item.split(","))
        shifts.append((dx, dy))
    return tuple(shifts)


def synth_config_from_mapping(raw: dict[str, str]) -> SynthConfig:
    r = _Reader(raw)
    events: tuple[DisturbanceEvent, ...] = ()
    ev_raw = r.str_("synth.events")
    if ev_raw:
        try:
            events = _parse_events(ev_raw)
        except ValueError as exc:
            r.problems.append(f"synth.events: {exc}")
    shifts = None
    sh_raw = r.str_("synth.shifts")
    if sh_raw:
        try:
            shifts = _parse_shifts(sh_raw)
        except ValueError as exc:
            r.problems.append(f"synth.shifts: {exc}")
    base = None
    bh_raw = r.str_("synth.base_heights")
    if bh_raw:
        try:
            base = tuple(float(s) for s in bh_raw.split(","))
        except ValueError as exc:
            r.problems.append(f"synth.base_heights: {exc}")

    cfg = None
    try:
        cfg = SynthConfig(
            seed=r.int_("synth.seed", 0),
            n_years=r.int_("synth.n_years", 5),
            height=r.int_("synth.height", 64),
            width=r.int_("synth.width", 64),
            pixel_size=r.float_("synth.pixel_size", 1.5),
            year_start=r.int_("synth.year_start", 2014),
            n_stands=r.int_("synth.n_stands", 12),
            growth_range=(r.float_("synth.growth_min", 0.1),
                          r.float_("synth.growth_max", 0.5)),
            events=events,
            noise_sigma=r.float_("synth.noise_sigma", 0.0),
            shifts=shifts,
            base_heights=base,
            layout_seed=r.int_("synth.layout_seed", 1234),
        )
    except ValueError as exc:
        r.problems.append(f"synth: {exc}")

    for key in r.unknown_keys(("synth.",)):
        r.problems.append(f"{key}: unknown key")
    if r.problems:
        raise ConfigError(r.problems)
    return cfg
