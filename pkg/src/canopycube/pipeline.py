"""Staged disturbance-mapping pipeline.

Stages run in a fixed order, each writing into its own directory under the
run's output root:

    coregister/   aligned cube + offsets.csv
    denoise/      denoised cube
    delta/        polygons.geojson
    metrics/      area_metrics.csv, pr_curve.csv, plot_metrics.csv,
                  height_validation.csv (only what the config enables)

A stage that raises has its partial output moved to failed/<stage>/ so a
rerun starts clean. A completed run ends with manifest.txt listing the
sha256 of every produced file; two runs of the same config must produce
identical manifests regardless of worker count.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
import time
from pathlib import Path

from .config import PipelineConfig
from .coregister import coregister_cube, write_offsets_csv
from .delta import cube_to_polygons, DeltaConfig
from .metrics import (area_metrics, height_validation, plot_metrics, pr_curve_points,
                      read_plots_csv, write_area_metrics_csv,
                      write_height_validation_csv, write_plot_metrics_csv,
                      write_pr_csv)
from .polygons import read_geojson, write_geojson
from .raster import read_cube, read_raster, write_cube
from .tv import denoise_tiled

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


def _fail_stage(out_dir: Path, stage: str, stage_dir: Path, cause: BaseException):
    failed = out_dir / "failed" / stage
    if failed.exists():
        shutil.rmtree(failed)
    if stage_dir.exists():
        failed.parent.mkdir(parents=True, exist_ok=True)
        shutil.move(str(stage_dir), str(failed))
    raise StageError(stage, cause) from cause


def write_manifest(out_dir: Path) -> Path:
    """sha256 of every file under out_dir, sorted by relative path."""
    out_dir = Path(out_dir)
    lines = []
    for path in sorted(out_dir.rglob("*")):
        if not path.is_file() or path.name == "manifest.txt":
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path.relative_to(out_dir).as_posix()}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def run_pipeline(cfg: PipelineConfig) -> Path:
    """Run every enabled stage; returns the manifest path."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    cube = read_cube(cfg.input_cube_dir)
    log.info("read cube: %d years %dx%d (%.2fs)", cube.n_years,
             cube.meta.height, cube.meta.width, time.perf_counter() - t0)

    stage = "coregister"
    stage_dir = out_dir / stage
    try:
        t0 = time.perf_counter()
        stage_dir.mkdir(parents=True, exist_ok=True)
        cube, offsets = coregister_cube(cube, cfg.offsets, workers=cfg.workers)
        write_cube(cube, stage_dir)
        write_offsets_csv(offsets, stage_dir / "offsets.csv")
        log.info("stage %s done (%.2fs)", stage, time.perf_counter() - t0)
    except Exception as exc:
        _fail_stage(out_dir, stage, stage_dir, exc)

    if not cfg.skip_denoise:
        stage = "denoise"
        stage_dir = out_dir / stage
        try:
            t0 = time.perf_counter()
            stage_dir.mkdir(parents=True, exist_ok=True)
            cube, _reports = denoise_tiled(cube, cfg.tv, tile_size=cfg.tile_size,
                                           workers=cfg.workers)
            write_cube(cube, stage_dir)
            log.info("stage %s done (%.2fs)", stage, time.perf_counter() - t0)
        except Exception as exc:
            _fail_stage(out_dir, stage, stage_dir, exc)

    stage = "delta"
    stage_dir = out_dir / stage
    try:
        t0 = time.perf_counter()
        stage_dir.mkdir(parents=True, exist_ok=True)
        delta_cfg = cfg.delta
        if cfg.forest_mask_path is not None:
            forest = read_raster(cfg.forest_mask_path)
            delta_cfg = DeltaConfig(
                loss_threshold_m=cfg.delta.loss_threshold_m,
                kernel_size=cfg.delta.kernel_size,
                min_area_m2=cfg.delta.min_area_m2,
                forest_mask=forest,
            )
        polygons = cube_to_polygons(cube, delta_cfg)
        write_geojson(polygons, stage_dir / "polygons.geojson")
        log.info("stage %s done: %d polygons (%.2fs)", stage,
                 len(polygons.polygons), time.perf_counter() - t0)
    except Exception as exc:
        _fail_stage(out_dir, stage, stage_dir, exc)

    wants_metrics = (cfg.reference_polygons_path is not None
                     or cfg.plots_csv_path is not None)
    if wants_metrics:
        stage = "metrics"
        stage_dir = out_dir / stage
        try:
            t0 = time.perf_counter()
            stage_dir.mkdir(parents=True, exist_ok=True)
            if cfg.reference_polygons_path is not None:
                reference = read_geojson(cfg.reference_polygons_path)
                am = area_metrics(polygons, reference, cube.meta, cfg.size_bins)
                write_area_metrics_csv(am, stage_dir / "area_metrics.csv")
                if reference.polygons:
                    points = pr_curve_points(polygons, reference, cube.meta)
                    write_pr_csv(points, stage_dir / "pr_curve.csv")
            if cfg.plots_csv_path is not None:
                plots = read_plots_csv(cfg.plots_csv_path)
                if cfg.plot_period is not None:
                    pm = plot_metrics(plots, polygons, cfg.plot_period)
                    write_plot_metrics_csv(pm, stage_dir / "plot_metrics.csv")
                hv = height_validation(cube, plots, radius_m=cfg.height_radius_m)
                write_height_validation_csv(hv, stage_dir / "height_validation.csv")
            log.info("stage %s done (%.2fs)", stage, time.perf_counter() - t0)
        except Exception as exc:
            _fail_stage(out_dir, stage, stage_dir, exc)

    return write_manifest(out_dir)
