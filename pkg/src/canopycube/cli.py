"""Command-line entry points.

    canopycube simulate --out runs/sim [--config sim.cfg]
    canopycube coregister --cube data/cube --out runs/reg
    canopycube denoise --cube runs/reg --out runs/tv --lambda-temp 5 --lambda-spat 0.5
    canopycube delta --cube runs/tv --out runs/delta --threshold 5 --min-area 10
    canopycube validate-polygons --predicted p.geojson --reference r.geojson \\
        --grid data/cube --out runs/val
    canopycube validate-height --cube data/cube --plots plots.csv --out runs/val
    canopycube pipeline --config run.cfg [--out runs/full] [--workers 8]

Exit codes: 0 success, 2 configuration problem, 3 stage failure. Logs go to
standard error; results are files under --out.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import (ConfigError, parse_kv_file, pipeline_config_from_mapping,
                     synth_config_from_mapping)
from .coregister import OffsetSearchConfig, coregister_cube, write_offsets_csv
from .delta import DeltaConfig, cube_to_polygons
from .metrics import (SizeBins, area_metrics, height_validation, pr_curve_points,
                      read_plots_csv, write_area_metrics_csv,
                      write_height_validation_csv, write_pr_csv)
from .pipeline import StageError, run_pipeline
from .polygons import read_geojson, write_geojson
from .raster import RasterFormatError, read_cube, read_raster, write_cube
from .synth import generate, write_true_offsets_csv
from .tv import TvConfig, TvReport, denoise_tiled

log = logging.getLogger(__name__)


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError([message])


def _out_dir(ns) -> Path:
    out = getattr(ns, "out", None)
    _require(out is not None, "--out: required")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_mapping(ns) -> dict[str, str]:
    cfg_path = getattr(ns, "config", None)
    return parse_kv_file(cfg_path) if cfg_path else {}


def _read_cube_arg(path: str):
    p = Path(path)
    _require(p.is_dir(), f"--cube: not a directory: {p}")
    return read_cube(p)


def _grid_from_path(path: str):
    """Grid definition from a cube directory or a single raster header."""
    p = Path(path)
    if p.is_dir():
        return read_cube(p).meta
    if not p.with_suffix(".hdr").exists():
        raise ConfigError([f"--grid: expected a cube directory or raster, got {p}"])
    return read_raster(p).meta


def _write_report_csv(report: TvReport, path: Path):
    lines = ["iter,objective,rel_change"]
    for it, obj, rel in report.history:
        lines.append(f"{it},{repr(obj)},{repr(rel)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cmd_simulate(ns) -> int:
    out = _out_dir(ns)
    mapping = _load_mapping(ns)
    cfg = synth_config_from_mapping(mapping)
    if ns.seed is not None or ns.noise_sigma is not None:
        from dataclasses import replace
        kwargs = {}
        if ns.seed is not None:
            kwargs["seed"] = ns.seed
        if ns.noise_sigma is not None:
            kwargs["noise_sigma"] = ns.noise_sigma
        cfg = replace(cfg, **kwargs)
    truth = generate(cfg)
    write_cube(truth.clean_cube, out / "clean")
    write_cube(truth.noisy_cube, out / "noisy")
    write_true_offsets_csv(truth, out / "true_offsets.csv")
    write_geojson(truth.true_polygons, out / "true_polygons.geojson")
    log.info("simulate: %d years %dx%d, %d true polygons -> %s",
             cfg.n_years, cfg.height, cfg.width,
             len(truth.true_polygons.polygons), out)
    return 0


def _cmd_coregister(ns) -> int:
    out = _out_dir(ns)
    cube = _read_cube_arg(ns.cube)
    cfg = OffsetSearchConfig(
        window_radius=ns.window_radius,
        reference_index=ns.reference_index,
        patch_size=ns.patch_size,
        patch_overlap=ns.patch_overlap,
    )
    registered, offsets = coregister_cube(cube, cfg, workers=ns.workers or 1)
    write_cube(registered, out)
    write_offsets_csv(offsets, out / "offsets.csv")
    return 0


def _cmd_denoise(ns) -> int:
    out = _out_dir(ns)
    cube = _read_cube_arg(ns.cube)
    cfg = TvConfig(lambda_temp=ns.lambda_temp, lambda_spat=ns.lambda_spat,
                   max_iters=ns.max_iters, rel_tol=ns.tol)
    denoised, reports = denoise_tiled(cube, cfg, tile_size=ns.tile_size,
                                      workers=ns.workers or 1)
    write_cube(denoised, out)
    if len(reports) == 1:
        _write_report_csv(reports[0], out / "tv_report.csv")
    else:
        for k, report in enumerate(reports):
            _write_report_csv(report, out / f"tv_report_{k:03d}.csv")
    return 0


def _cmd_delta(ns) -> int:
    out = _out_dir(ns)
    cube = _read_cube_arg(ns.cube)
    forest = None
    if ns.forest_mask:
        p = Path(ns.forest_mask)
        _require(p.exists() or p.with_suffix(".hdr").exists(),
                 f"--forest-mask: path does not exist: {p}")
        forest = read_raster(p)
    cfg = DeltaConfig(loss_threshold_m=ns.threshold, kernel_size=ns.kernel,
                      min_area_m2=ns.min_area, forest_mask=forest)
    polygons = cube_to_polygons(cube, cfg)
    write_geojson(polygons, out / "polygons.geojson")
    for year in cube.years[1:]:
        write_geojson(polygons.for_year(year), out / f"polygons_{year}.geojson")
    return 0


def _cmd_validate_polygons(ns) -> int:
    out = _out_dir(ns)
    for flag, path in (("--predicted", ns.predicted), ("--reference", ns.reference)):
        _require(Path(path).exists(), f"{flag}: path does not exist: {path}")
    predicted = read_geojson(ns.predicted)
    reference = read_geojson(ns.reference)
    grid = _grid_from_path(ns.grid)
    bins = SizeBins(tuple(float(s) for s in ns.bins.split(","))) if ns.bins \
        else SizeBins()
    am = area_metrics(predicted, reference, grid, bins)
    write_area_metrics_csv(am, out / "area_metrics.csv")
    if reference.polygons and predicted.polygons:
        write_pr_csv(pr_curve_points(predicted, reference, grid),
                     out / "pr_curve.csv")
    log.info("validate-polygons: precision=%s recall=%s f1=%s iou=%s",
             am.precision, am.recall, am.f1, am.iou)
    return 0


def _cmd_validate_height(ns) -> int:
    out = _out_dir(ns)
    cube = _read_cube_arg(ns.cube)
    _require(Path(ns.plots).exists(), f"--plots: path does not exist: {ns.plots}")
    plots = read_plots_csv(ns.plots)
    hv = height_validation(cube, plots, radius_m=ns.radius)
    write_height_validation_csv(hv, out / "height_validation.csv")
    log.info("validate-height: n=%d mae=%s r2=%s", hv.n, hv.mae, hv.r2)
    return 0


def _cmd_pipeline(ns) -> int:
    _require(getattr(ns, "config", None) is not None, "--config: required")
    mapping = _load_mapping(ns)
    if getattr(ns, "out", None):
        mapping["output.dir"] = str(ns.out)
    if getattr(ns, "workers", None):
        mapping["run.workers"] = str(ns.workers)
    cfg = pipeline_config_from_mapping(mapping)
    manifest = run_pipeline(cfg)
    print(manifest)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, metavar="PATH",
                        help="key=value configuration file")
    shared.add_argument("--workers", type=int, default=None, metavar="N",
                        help="worker threads (default 1)")
    shared.add_argument("--out", default=None, metavar="DIR",
                        help="output directory")

    parser = argparse.ArgumentParser(
        prog="canopycube",
        description="Canopy height cube regularization and disturbance mapping.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[shared],
                       help="generate a synthetic scene with known truth")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("coregister", parents=[shared],
                       help="align every year to a reference layer")
    p.add_argument("--cube", required=True, metavar="DIR")
    p.add_argument("--window-radius", type=int, default=2)
    p.add_argument("--reference-index", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=2000)
    p.add_argument("--patch-overlap", type=int, default=64)
    p.set_defaults(func=_cmd_coregister)

    p = sub.add_parser("denoise", parents=[shared],
                       help="spatio-temporal total-variation smoothing")
    p.add_argument("--cube", required=True, metavar="DIR")
    p.add_argument("--lambda-temp", type=float, default=5.0)
    p.add_argument("--lambda-spat", type=float, default=0.5)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--tile-size", type=int, default=512)
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("delta", parents=[shared],
                       help="extract height-loss polygons between years")
    p.add_argument("--cube", required=True, metavar="DIR")
    p.add_argument("--threshold", type=float, default=5.0)
    p.add_argument("--min-area", type=float, default=10.0)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--forest-mask", default=None, metavar="PATH")
    p.set_defaults(func=_cmd_delta)

    p = sub.add_parser("validate-polygons", parents=[shared],
                       help="area precision/recall against reference polygons")
    p.add_argument("--predicted", required=True, metavar="GEOJSON")
    p.add_argument("--reference", required=True, metavar="GEOJSON")
    p.add_argument("--grid", required=True, metavar="PATH",
                   help="cube directory or raster defining the evaluation grid")
    p.add_argument("--bins", default=None, metavar="EDGES",
                   help="comma-separated bin edges in m2")
    p.set_defaults(func=_cmd_validate_polygons)

    p = sub.add_parser("validate-height", parents=[shared],
                       help="plot-level height agreement")
    p.add_argument("--cube", required=True, metavar="DIR")
    p.add_argument("--plots", required=True, metavar="CSV")
    p.add_argument("--radius", type=float, default=18.0)
    p.set_defaults(func=_cmd_validate_height)

    p = sub.add_parser("pipeline", parents=[shared],
                       help="run every stage from a configuration file")
    p.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code is not None else 0
    try:
        return ns.func(ns)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except StageError as exc:
        log.error("%s", exc)
        return 3
    except (RasterFormatError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
