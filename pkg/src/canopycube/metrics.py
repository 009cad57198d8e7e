"""Area-based polygon metrics, field-plot comparison, height validation.

All polygon metrics are computed on rasterized coverage (pixel center in
polygon) over an explicit grid, so "area" always means pixel count times
pixel area and self-comparison is exactly 1. Metrics whose denominator is
empty are reported as None rather than 0 or 1; CSV writers spell that
"undefined".
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .polygons import PolygonSet, polygon_intersects_disc, rasterize
from .raster import GridMeta, HeightCube

log = logging.getLogger(__name__)

UNDEFINED = "undefined"


def _ratio(num: float, den: float) -> float | None:
    return num / den if den > 0 else None


def _f1(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _fmt(v: float | None) -> str:
    return UNDEFINED if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# size-binned area metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SizeBins:
    """Half-open area bins [e0,e1), [e1,e2), ..., [e_last, inf) in m^2."""

    edges: tuple[float, ...] = (10.0, 100.0, 1000.0, 10000.0)

    def __post_init__(self):
        if len(self.edges) < 1:
            raise ValueError("need at least one bin edge")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError(f"bin edges must be strictly increasing: {self.edges}")
        if self.edges[0] <= 0:
            raise ValueError("bin edges must be positive")

    def spans(self) -> list[tuple[float, float]]:
        ext = (*self.edges, np.inf)
        return [(ext[i], ext[i + 1]) for i in range(len(self.edges))]

    def index_for(self, area_m2: float) -> int | None:
        if area_m2 < self.edges[0]:
            return None
        return int(np.searchsorted(self.edges, area_m2, side="right")) - 1


@dataclass(frozen=True)
class BinMetrics:
    lo_m2: float
    hi_m2: float
    precision: float | None
    recall: float | None
    predicted_area_m2: float
    reference_area_m2: float
    predicted_hit_area_m2: float
    reference_hit_area_m2: float


@dataclass(frozen=True)
class AreaMetrics:
    precision: float | None
    recall: float | None
    f1: float | None
    iou: float | None
    overlap_area_m2: float
    predicted_area_m2: float
    reference_area_m2: float
    per_bin: tuple[BinMetrics, ...]


def area_metrics(predicted: PolygonSet, reference: PolygonSet, grid: GridMeta,
                 bins: SizeBins = SizeBins()) -> AreaMetrics:
    """Rasterized precision/recall/F1/IoU, overall and per size bin.

    Per-bin precision restricts the prediction to the bin but compares it
    against the whole reference, and vice versa for per-bin recall.
    """
    px = float(grid.pixel_size) ** 2
    pred = rasterize(predicted, grid)
    ref = rasterize(reference, grid)
    overlap = float(np.sum(pred & ref)) * px
    pred_area = float(pred.sum()) * px
    ref_area = float(ref.sum()) * px
    union = pred_area + ref_area - overlap

    precision = _ratio(overlap, pred_area)
    recall = _ratio(overlap, ref_area)

    per_bin = []
    for lo, hi in bins.spans():
        pred_bin = rasterize((p for p in predicted if lo <= p.area_m2 < hi), grid)
        ref_bin = rasterize((p for p in reference if lo <= p.area_m2 < hi), grid)
        pred_bin_area = float(pred_bin.sum()) * px
        ref_bin_area = float(ref_bin.sum()) * px
        pred_hit = float(np.sum(pred_bin & ref)) * px
        ref_hit = float(np.sum(pred & ref_bin)) * px
        per_bin.append(BinMetrics(
            lo_m2=lo, hi_m2=hi,
            precision=_ratio(pred_hit, pred_bin_area),
            recall=_ratio(ref_hit, ref_bin_area),
            predicted_area_m2=pred_bin_area,
            reference_area_m2=ref_bin_area,
            predicted_hit_area_m2=pred_hit,
            reference_hit_area_m2=ref_hit,
        ))

    return AreaMetrics(
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        iou=_ratio(overlap, union),
        overlap_area_m2=overlap,
        predicted_area_m2=pred_area,
        reference_area_m2=ref_area,
        per_bin=tuple(per_bin),
    )


# ---------------------------------------------------------------------------
# precision-recall over ascending polygon size
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrPoint:
    k: int
    area_m2: float
    recall: float
    precision: float


def pr_curve_points(predicted: PolygonSet, reference: PolygonSet,
                    grid: GridMeta) -> list[PrPoint]:
    """PR points after adding predicted polygons one by one, smallest first."""
    if len(reference) == 0:
        raise ValueError("reference set is empty; recall is undefined")
    ref = rasterize(reference, grid)
    ref_area = float(ref.sum())
    if ref_area == 0:
        raise ValueError("reference rasterizes to zero pixels; recall is undefined")
    order = sorted(range(len(predicted)), key=lambda i: (predicted[i].area_m2, i))
    acc = np.zeros(grid.shape, dtype=bool)
    points = []
    for k, idx in enumerate(order, start=1):
        poly = predicted[idx]
        acc |= rasterize([poly], grid)
        covered = float(acc.sum())
        hit = float(np.sum(acc & ref))
        points.append(PrPoint(
            k=k,
            area_m2=float(poly.area_m2),
            recall=hit / ref_area,
            precision=hit / covered if covered > 0 else 1.0,
        ))
    return points


def pr_curve(predicted: PolygonSet, reference: PolygonSet,
             grid: GridMeta) -> list[tuple[float, float]]:
    """(recall, precision) pairs; the final point is the overall score."""
    return [(p.recall, p.precision) for p in pr_curve_points(predicted, reference, grid)]


def write_pr_csv(points: list[PrPoint], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["k", "area_m2", "recall", "precision"])
        for p in points:
            out.writerow([p.k, repr(p.area_m2), repr(p.recall), repr(p.precision)])


# ---------------------------------------------------------------------------
# field plots
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlotRecord:
    """One repeatedly-visited field plot (disc) with tree tallies."""

    plot_id: str
    x: float
    y: float
    radius_m: float
    year_first: int
    year_second: int
    n_trees_first: int
    n_disturbed: int
    tallest_tree_m: float
    height_year: int

    def __post_init__(self):
        if self.radius_m <= 0:
            raise ValueError(f"plot {self.plot_id}: radius must be positive")
        if not 0 <= self.n_disturbed <= self.n_trees_first:
            raise ValueError(
                f"plot {self.plot_id}: need 0 <= n_disturbed <= n_trees_first"
            )
        if self.year_second <= self.year_first:
            raise ValueError(f"plot {self.plot_id}: visits must be in order")

    @property
    def disturbed(self) -> bool:
        return self.n_disturbed >= 1


PLOTS_CSV_COLUMNS = ["plot_id", "x", "y", "radius_m", "year_first", "year_second",
                     "n_trees", "n_disturbed", "tallest_tree_m", "height_year"]


def read_plots_csv(path: str | Path) -> list[PlotRecord]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(PLOTS_CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns: {sorted(missing)}")
        plots = []
        for row in reader:
            plots.append(PlotRecord(
                plot_id=row["plot_id"],
                x=float(row["x"]), y=float(row["y"]),
                radius_m=float(row["radius_m"]),
                year_first=int(row["year_first"]),
                year_second=int(row["year_second"]),
                n_trees_first=int(row["n_trees"]),
                n_disturbed=int(row["n_disturbed"]),
                tallest_tree_m=float(row["tallest_tree_m"]),
                height_year=int(row["height_year"]),
            ))
    return plots


def write_plots_csv(plots: list[PlotRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(PLOTS_CSV_COLUMNS)
        for p in plots:
            out.writerow([p.plot_id, repr(p.x), repr(p.y), repr(p.radius_m),
                          p.year_first, p.year_second, p.n_trees_first,
                          p.n_disturbed, repr(p.tallest_tree_m), p.height_year])


@dataclass(frozen=True)
class MagnitudeBin:
    lo_pct: int
    hi_pct: int
    n_plots: int
    n_detected: int
    recall: float | None


@dataclass(frozen=True)
class PlotMetrics:
    tp: int
    tn: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    f1: float | None
    by_magnitude: tuple[MagnitudeBin, ...]
    excluded_no_trees: int


def plot_metrics(plots: list[PlotRecord], predicted: PolygonSet,
                 period: tuple[int, int]) -> PlotMetrics:
    """Confusion counts of plot-level detection within (year_lo, year_hi].

    A plot counts as detected when any predicted polygon whose year falls in
    the half-open period touches the plot disc. Plots with no trees at the
    first visit cannot be classified and are excluded (with a warning).
    """
    year_lo, year_hi = period
    if year_hi <= year_lo:
        raise ValueError(f"empty period ({year_lo}, {year_hi}]")
    candidates = [p for p in predicted
                  if p.year is not None and year_lo < p.year <= year_hi]

    tp = tn = fp = fn = 0
    excluded = 0
    mag_total = [0] * 10
    mag_hit = [0] * 10
    for plot in plots:
        if plot.n_trees_first == 0:
            excluded += 1
            continue
        covered = any(polygon_intersects_disc(poly, plot.x, plot.y, plot.radius_m)
                      for poly in candidates)
        if plot.disturbed:
            frac = plot.n_disturbed / plot.n_trees_first
            klass = min(int(frac * 10), 9)
            mag_total[klass] += 1
            if covered:
                tp += 1
                mag_hit[klass] += 1
            else:
                fn += 1
        else:
            if covered:
                fp += 1
            else:
                tn += 1
    if excluded:
        log.warning("plot metrics: %d plots excluded (no trees at first visit)",
                    excluded)

    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    bins = tuple(
        MagnitudeBin(10 * i, 10 * (i + 1), mag_total[i], mag_hit[i],
                     _ratio(mag_hit[i], mag_total[i]))
        for i in range(10)
    )
    return PlotMetrics(tp=tp, tn=tn, fp=fp, fn=fn, precision=precision,
                       recall=recall, f1=_f1(precision, recall),
                       by_magnitude=bins, excluded_no_trees=excluded)


# ---------------------------------------------------------------------------
# height validation against plot-measured tree heights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class YearStats:
    year: int
    n: int
    mae: float
    r2: float | None


@dataclass(frozen=True)
class DiffBin:
    lo_m: float
    hi_m: float
    n: int
    median: float
    q25: float
    q75: float
    p05: float
    p95: float


@dataclass(frozen=True)
class HeightValidation:
    n: int
    mae: float | None
    r2: float | None
    by_year: tuple[YearStats, ...]
    mae_sd_across_years: float | None
    r2_sd_across_years: float | None
    by_reference_bin: tuple[DiffBin, ...]
    excluded_outside: int
    excluded_no_year: int
    excluded_all_nodata: int


def _r2(pred: np.ndarray, ref: np.ndarray) -> float | None:
    ss_tot = float(np.sum((ref - ref.mean()) ** 2))
    if ss_tot == 0:
        return None
    ss_res = float(np.sum((ref - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def height_validation(cube: HeightCube, plots: list[PlotRecord],
                      radius_m: float = 18.0, bin_width_m: float = 5.0
                      ) -> HeightValidation:
    """Tallest-tree check: max height within ``radius_m`` vs measured height.

    Plots outside the grid, without a matching year layer, or with an
    all-nodata disc are excluded and tallied.
    """
    meta = cube.meta
    xc = meta.x_centers()
    yc = meta.y_centers()
    nodata = np.float32(meta.nodata)

    preds, refs, years = [], [], []
    excluded_outside = excluded_no_year = excluded_nodata = 0
    for plot in plots:
        try:
            t = cube.index_for_year(plot.height_year)
        except KeyError:
            excluded_no_year += 1
            continue
        in_x = np.abs(xc - plot.x) <= radius_m
        in_y = np.abs(yc - plot.y) <= radius_m
        if not in_x.any() or not in_y.any():
            excluded_outside += 1
            continue
        cols = np.flatnonzero(in_x)
        rows = np.flatnonzero(in_y)
        dx = xc[cols] - plot.x
        dy = yc[rows] - plot.y
        disc = (dy[:, None] ** 2 + dx[None, :] ** 2) <= radius_m ** 2
        if not disc.any():
            excluded_outside += 1
            continue
        window = cube.values[t][np.ix_(rows, cols)]
        sample = window[disc & (window != nodata)]
        if sample.size == 0:
            excluded_nodata += 1
            continue
        preds.append(float(sample.max()))
        refs.append(plot.tallest_tree_m)
        years.append(plot.height_year)

    n = len(preds)
    if n == 0:
        return HeightValidation(0, None, None, (), None, None, (),
                                excluded_outside, excluded_no_year, excluded_nodata)

    pred = np.asarray(preds)
    ref = np.asarray(refs)
    year_arr = np.asarray(years)
    mae = float(np.mean(np.abs(pred - ref)))
    r2 = _r2(pred, ref)

    by_year = []
    for year in sorted(set(years)):
        sel = year_arr == year
        by_year.append(YearStats(
            year=year, n=int(sel.sum()),
            mae=float(np.mean(np.abs(pred[sel] - ref[sel]))),
            r2=_r2(pred[sel], ref[sel]),
        ))
    maes = [s.mae for s in by_year]
    r2s = [s.r2 for s in by_year if s.r2 is not None]
    mae_sd = float(np.std(maes)) if len(maes) >= 2 else None
    r2_sd = float(np.std(r2s)) if len(r2s) >= 2 else None

    diffs = pred - ref
    bins = []
    top = float(ref.max())
    lo = 0.0
    while lo <= top:
        hi = lo + bin_width_m
        sel = (ref >= lo) & (ref < hi)
        if sel.any():
            d = diffs[sel]
            bins.append(DiffBin(
                lo_m=lo, hi_m=hi, n=int(sel.sum()),
                median=float(np.median(d)),
                q25=float(np.percentile(d, 25)),
                q75=float(np.percentile(d, 75)),
                p05=float(np.percentile(d, 5)),
                p95=float(np.percentile(d, 95)),
            ))
        lo = hi

    return HeightValidation(
        n=n, mae=mae, r2=r2, by_year=tuple(by_year),
        mae_sd_across_years=mae_sd, r2_sd_across_years=r2_sd,
        by_reference_bin=tuple(bins),
        excluded_outside=excluded_outside,
        excluded_no_year=excluded_no_year,
        excluded_all_nodata=excluded_nodata,
    )


# ---------------------------------------------------------------------------
# CSV writers for the pipeline
# ---------------------------------------------------------------------------


def write_area_metrics_csv(m: AreaMetrics, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["scope", "lo_m2", "hi_m2", "precision", "recall", "f1", "iou",
                      "predicted_area_m2", "reference_area_m2", "overlap_area_m2"])
        out.writerow(["overall", "", "", _fmt(m.precision), _fmt(m.recall),
                      _fmt(m.f1), _fmt(m.iou), repr(m.predicted_area_m2),
                      repr(m.reference_area_m2), repr(m.overlap_area_m2)])
        for b in m.per_bin:
            out.writerow(["bin", repr(b.lo_m2), "inf" if np.isinf(b.hi_m2) else repr(b.hi_m2),
                          _fmt(b.precision), _fmt(b.recall), "", "",
                          repr(b.predicted_area_m2), repr(b.reference_area_m2), ""])


def write_plot_metrics_csv(m: PlotMetrics, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["tp", "tn", "fp", "fn", "precision", "recall", "f1",
                      "excluded_no_trees"])
        out.writerow([m.tp, m.tn, m.fp, m.fn, _fmt(m.precision), _fmt(m.recall),
                      _fmt(m.f1), m.excluded_no_trees])
        out.writerow([])
        out.writerow(["magnitude_lo_pct", "magnitude_hi_pct", "n_plots",
                      "n_detected", "recall"])
        for b in m.by_magnitude:
            out.writerow([b.lo_pct, b.hi_pct, b.n_plots, b.n_detected, _fmt(b.recall)])


def write_height_validation_csv(v: HeightValidation, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["n", "mae", "r2", "mae_sd_across_years", "r2_sd_across_years",
                      "excluded_outside", "excluded_no_year", "excluded_all_nodata"])
        out.writerow([v.n, _fmt(v.mae), _fmt(v.r2), _fmt(v.mae_sd_across_years),
                      _fmt(v.r2_sd_across_years), v.excluded_outside,
                      v.excluded_no_year, v.excluded_all_nodata])
        out.writerow([])
        out.writerow(["year", "n", "mae", "r2"])
        for s in v.by_year:
            out.writerow([s.year, s.n, repr(s.mae), _fmt(s.r2)])
        out.writerow([])
        out.writerow(["ref_lo_m", "ref_hi_m", "n", "median", "q25", "q75", "p05", "p95"])
        for b in v.by_reference_bin:
            out.writerow([repr(b.lo_m), repr(b.hi_m), b.n, repr(b.median),
                          repr(b.q25), repr(b.q75), repr(b.p05), repr(b.p95)])
