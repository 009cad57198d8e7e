import csv
import logging
import math

import numpy as np
import pytest

from canopycube.metrics import (AreaMetrics, PlotRecord, SizeBins,
                                area_metrics, height_validation, plot_metrics,
                                pr_curve, pr_curve_points, read_plots_csv,
                                write_area_metrics_csv,
                                write_height_validation_csv,
                                write_plot_metrics_csv, write_plots_csv,
                                write_pr_csv)
from canopycube.polygons import PolygonSet
from canopycube.raster import DEFAULT_NODATA

from conftest import make_cube, rect_polygon

# Rectangle edges sit between pixel centers of the 1.5 m grid, so rasterized
# coverage equals shoelace area exactly and the expected ratios are exact.
REF = rect_polygon(6.0, -6.0, 18.0, -18.0)            # 8x8 px = 144 m2
RIGHT_HALF = rect_polygon(12.0, -6.0, 18.0, -18.0)    # 4x8 px = 72 m2
FAR = rect_polygon(30.0, -30.0, 36.0, -36.0)          # disjoint from REF


def pset(*polys):
    return PolygonSet(polygons=tuple(polys))


def test_size_bins_validation():
    with pytest.raises(ValueError):
        SizeBins(edges=())
    with pytest.raises(ValueError):
        SizeBins(edges=(10.0, 10.0))
    with pytest.raises(ValueError):
        SizeBins(edges=(0.0, 10.0))
    bins = SizeBins(edges=(10.0, 100.0))
    assert bins.index_for(5.0) is None
    assert bins.index_for(10.0) == 0
    assert bins.index_for(99.9) == 0
    assert bins.index_for(100.0) == 1
    assert bins.spans() == [(10.0, 100.0), (100.0, math.inf)]


def test_self_comparison_is_perfect(meta32):
    m = area_metrics(pset(REF), pset(REF), meta32)
    assert (m.precision, m.recall, m.f1, m.iou) == (1.0, 1.0, 1.0, 1.0)
    assert m.overlap_area_m2 == 144.0


def test_half_overlap_exact(meta32):
    m = area_metrics(pset(RIGHT_HALF), pset(REF), meta32)
    assert m.precision == 1.0
    assert m.recall == 0.5
    assert m.f1 == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert m.iou == 0.5


def test_disjoint_is_zero(meta32):
    m = area_metrics(pset(FAR), pset(REF), meta32)
    assert (m.precision, m.recall, m.f1, m.iou) == (0.0, 0.0, 0.0, 0.0)


def test_empty_sets_are_undefined(meta32):
    m = area_metrics(pset(), pset(), meta32)
    assert m.precision is None and m.recall is None
    assert m.f1 is None and m.iou is None


def test_precision_recall_symmetry(meta32):
    a, b = pset(RIGHT_HALF, FAR), pset(REF)
    assert area_metrics(a, b, meta32).precision == area_metrics(b, a, meta32).recall
    assert area_metrics(a, b, meta32).recall == area_metrics(b, a, meta32).precision


def test_per_bin_recall_weighted_sum(meta32):
    # two reference polygons in different bins, partially covered
    small = rect_polygon(1.5, -1.5, 6.0, -6.0)        # 3x3 px = 20.25 m2
    big = rect_polygon(9.0, -9.0, 27.0, -27.0)        # 12x12 px = 324 m2
    pred = pset(rect_polygon(1.5, -1.5, 4.5, -6.0),   # 2x3 of small
                rect_polygon(9.0, -9.0, 27.0, -18.0))  # half of big
    ref = pset(small, big)
    m = area_metrics(pred, ref, meta32, bins=SizeBins(edges=(10.0, 100.0)))
    hit = sum(b.reference_hit_area_m2 for b in m.per_bin)
    total = sum(b.reference_area_m2 for b in m.per_bin)
    assert total > 0
    assert abs(hit / total - m.recall) < 1e-9
    assert m.per_bin[0].recall == pytest.approx(6 / 9, abs=1e-12)
    assert m.per_bin[1].recall == pytest.approx(0.5, abs=1e-12)


def test_bin_with_nothing_is_undefined(meta32):
    m = area_metrics(pset(REF), pset(REF), meta32,
                     bins=SizeBins(edges=(10.0, 1000.0)))
    assert m.per_bin[1].precision is None
    assert m.per_bin[1].recall is None


def test_pr_curve_monotone_recall_final_overall(meta32):
    pred = pset(rect_polygon(12.0, -6.0, 18.0, -18.0),
                rect_polygon(6.0, -6.0, 12.0, -18.0),
                FAR)
    ref = pset(REF)
    pts = pr_curve_points(pred, ref, meta32)
    assert [p.k for p in pts] == [1, 2, 3]
    assert pts[0].area_m2 <= pts[1].area_m2 <= pts[2].area_m2
    recalls = [p.recall for p in pts]
    assert recalls == sorted(recalls)
    overall = area_metrics(pred, ref, meta32)
    assert pts[-1].recall == overall.recall
    assert pts[-1].precision == overall.precision


def test_pr_curve_single_exact_match(meta32):
    assert pr_curve(pset(REF), pset(REF), meta32) == [(1.0, 1.0)]


def test_pr_curve_empty_predicted(meta32):
    assert pr_curve(pset(), pset(REF), meta32) == []


def test_pr_curve_empty_reference_raises(meta32):
    with pytest.raises(ValueError):
        pr_curve(pset(REF), pset(), meta32)


def _plot(pid, x, y, n_trees, n_disturbed, **kw):
    args = dict(plot_id=pid, x=x, y=y, radius_m=4.0, year_first=2014,
                year_second=2018, n_trees_first=n_trees,
                n_disturbed=n_disturbed, tallest_tree_m=20.0, height_year=2014)
    args.update(kw)
    return PlotRecord(**args)


def test_plot_record_validation():
    with pytest.raises(ValueError):
        _plot("p", 0, 0, 10, 0, radius_m=0.0)
    with pytest.raises(ValueError):
        _plot("p", 0, 0, 4, 5)
    with pytest.raises(ValueError):
        _plot("p", 0, 0, 10, 0, year_second=2014)


def test_plot_confusion_counts(caplog):
    detected = rect_polygon(6.0, -6.0, 18.0, -18.0, year=2016)
    plots = [
        # disturbed, inside the detected polygon: TP
        _plot("tp1", 12.0, -12.0, 4, 1),   # frac 0.25 -> 20-30% class
        _plot("tp2", 12.0, -12.0, 2, 1),   # frac 0.5  -> 50-60%
        _plot("tp3", 12.0, -12.0, 4, 3),   # frac 0.75 -> 70-80%
        # disturbed, far away: FN, frac 1.0 -> clamped into 90-100%
        _plot("fn1", 40.0, -40.0, 1, 1),
        # intact but covered: FP
        _plot("fp1", 12.0, -12.0, 5, 0),
        # intact and clear: TN x5
        *[_plot(f"tn{i}", 40.0, -40.0, 5, 0) for i in range(5)],
        # unclassifiable
        _plot("empty", 12.0, -12.0, 0, 0),
    ]
    with caplog.at_level(logging.WARNING):
        m = plot_metrics(plots, pset(detected), period=(2014, 2018))
    assert (m.tp, m.fn, m.fp, m.tn) == (3, 1, 1, 5)
    assert m.precision == 0.75
    assert m.recall == 0.75
    assert m.f1 == pytest.approx(0.75, abs=1e-12)
    assert m.excluded_no_trees == 1
    assert "excluded" in caplog.text

    filled = {(b.lo_pct, b.hi_pct): (b.n_plots, b.n_detected)
              for b in m.by_magnitude if b.n_plots}
    assert filled == {(20, 30): (1, 1), (50, 60): (1, 1),
                      (70, 80): (1, 1), (90, 100): (1, 0)}
    assert m.by_magnitude[9].recall == 0.0
    assert m.by_magnitude[0].recall is None


def test_plot_period_is_half_open():
    poly_lo = rect_polygon(6.0, -6.0, 18.0, -18.0, year=2014)
    poly_hi = rect_polygon(6.0, -6.0, 18.0, -18.0, year=2018)
    plot = [_plot("p", 12.0, -12.0, 4, 2)]
    # a polygon dated at the period start does not count
    assert plot_metrics(plot, pset(poly_lo), (2014, 2018)).tp == 0
    # one dated at the period end does
    assert plot_metrics(plot, pset(poly_hi), (2014, 2018)).tp == 1
    with pytest.raises(ValueError):
        plot_metrics(plot, pset(), (2018, 2014))


def _height_cube(tall):
    """Two constant 10 m layers with tall pixels at given (row, col, h)."""
    layers = np.full((2, 32, 32), 10.0, dtype=np.float32)
    for row, col, h in tall:
        layers[0, row, col] = h
    return make_cube(layers, years=(2014, 2016))


def test_height_validation_exact():
    cube = _height_cube([(7, 7, 25.0), (7, 23, 31.0)])
    plots = [
        _plot("a", 11.25, -11.25, 5, 0, tallest_tree_m=25.0, height_year=2014),
        _plot("b", 35.25, -11.25, 5, 0, tallest_tree_m=31.0, height_year=2014),
    ]
    v = height_validation(cube, plots, radius_m=4.0)
    assert v.n == 2
    assert v.mae == 0.0
    assert v.r2 == 1.0


def test_height_validation_offsets():
    spots = [(7, 7), (7, 23), (23, 7), (23, 23), (15, 15)]
    heights = [20.0, 25.0, 30.0, 35.0, 40.0]
    offsets = [1.0, -2.0, 3.0, 0.0, -1.0]   # prediction minus reference
    cube = _height_cube([(r, c, h) for (r, c), h in zip(spots, heights)])
    plots = [
        _plot(f"p{i}", 0.75 + 1.5 * c, -(0.75 + 1.5 * r), 5, 0,
              tallest_tree_m=h - off, height_year=2014)
        for i, ((r, c), h, off) in enumerate(zip(spots, heights, offsets))
    ]
    v = height_validation(cube, plots, radius_m=4.0)
    assert v.n == 5
    assert v.mae == pytest.approx(1.4, abs=1e-6)
    assert v.r2 is not None and 0.9 < v.r2 < 1.0
    assert v.by_year[0].year == 2014 and v.by_year[0].n == 5
    assert v.mae_sd_across_years is None  # single year
    # reference heights 19..41 fall in 5 m bins starting at 15
    lows = [b.lo_m for b in v.by_reference_bin]
    assert lows == sorted(lows)
    assert sum(b.n for b in v.by_reference_bin) == 5


def test_height_validation_constant_reference_r2_undefined():
    cube = _height_cube([(7, 7, 25.0), (7, 23, 25.0)])
    plots = [
        _plot("a", 11.25, -11.25, 5, 0, tallest_tree_m=25.0, height_year=2014),
        _plot("b", 35.25, -11.25, 5, 0, tallest_tree_m=25.0, height_year=2014),
    ]
    v = height_validation(cube, plots, radius_m=4.0)
    assert v.mae == 0.0
    assert v.r2 is None


def test_height_validation_exclusions():
    layers = np.full((2, 32, 32), 10.0, dtype=np.float32)
    layers[0, 0:8, 0:8] = DEFAULT_NODATA
    cube = make_cube(layers, years=(2014, 2016))
    plots = [
        _plot("outside", 1e5, -12.0, 5, 0, height_year=2014),
        _plot("noyear", 12.0, -12.0, 5, 0, height_year=1999),
        _plot("nodata", 3.0, -3.0, 5, 0, height_year=2014, radius_m=2.0),
        _plot("ok", 24.0, -24.0, 5, 0, tallest_tree_m=10.0, height_year=2014),
    ]
    v = height_validation(cube, plots, radius_m=4.0)
    assert v.excluded_outside == 1
    assert v.excluded_no_year == 1
    assert v.excluded_all_nodata == 1
    assert v.n == 1 and v.mae == 0.0 and v.r2 is None


def test_plots_csv_round_trip(tmp_path):
    plots = [_plot("a", 1.5, -2.5, 7, 3), _plot("b", 10.0, -20.0, 4, 0)]
    path = tmp_path / "plots.csv"
    write_plots_csv(plots, path)
    assert read_plots_csv(path) == plots
    header = path.read_text().splitlines()[0]
    assert header.split(",")[:4] == ["plot_id", "x", "y", "radius_m"]


def test_plots_csv_missing_column(tmp_path):
    path = tmp_path / "plots.csv"
    path.write_text("plot_id,x,y\nq,1,2\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_plots_csv(path)


def test_csv_writers_spell_undefined(tmp_path, meta32):
    m = area_metrics(pset(), pset(), meta32)
    out = tmp_path / "area.csv"
    write_area_metrics_csv(m, out)
    assert "undefined" in out.read_text()

    pm = plot_metrics([], pset(), (2014, 2018))
    out2 = tmp_path / "plot.csv"
    write_plot_metrics_csv(pm, out2)
    assert "undefined" in out2.read_text()

    hv = height_validation(_height_cube([]), [], radius_m=4.0)
    out3 = tmp_path / "height.csv"
    write_height_validation_csv(hv, out3)
    assert "undefined" in out3.read_text()


def test_pr_csv_format(tmp_path, meta32):
    pts = pr_curve_points(pset(REF), pset(REF), meta32)
    out = tmp_path / "pr.csv"
    write_pr_csv(pts, out)
    with out.open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "area_m2", "recall", "precision"]
    assert rows[1] == ["1", "144.0", "1.0", "1.0"]
