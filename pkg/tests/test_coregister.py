import numpy as np
import pytest

from canopycube.coregister import (OffsetSearchConfig, best_offset,
                                   coregister_cube, patch_grid,
                                   write_offsets_csv)
from canopycube.raster import DEFAULT_NODATA
from canopycube.synth import SynthConfig, generate, shift_replicate

from conftest import make_cube, make_raster


def literal_msd(moving, reference, dx, dy):
    """Straight-loop mean squared difference oracle, no vector tricks."""
    h, w = reference.shape
    total, n = 0.0, 0
    for r in range(h):
        for c in range(w):
            rm, cm = r + dy, c + dx
            if 0 <= rm < h and 0 <= cm < w:
                a, b = moving[rm, cm], reference[r, c]
                if a != DEFAULT_NODATA and b != DEFAULT_NODATA:
                    total += float(a - b) ** 2
                    n += 1
    return total / n if n else None


def stand_layer(seed=0, size=24):
    rng = np.random.default_rng(seed)
    sites = rng.uniform(0, size, size=(6, 2))
    heights = rng.uniform(5, 35, size=6)
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    d = (rr[:, :, None] - sites[:, 0]) ** 2 + (cc[:, :, None] - sites[:, 1]) ** 2
    return heights[d.argmin(axis=2)].astype(np.float32)


def test_identity_offset():
    layer = stand_layer()
    r = make_raster(layer)
    assert best_offset(r, r, window_radius=2) == (0, 0, 0.0)


def test_known_shift_recovered():
    layer = stand_layer(1)
    moved = shift_replicate(layer, 1, -2)
    dx, dy, score = best_offset(make_raster(moved), make_raster(layer), 2)
    assert (dx, dy) == (1, -2)
    assert score == 0.0  # interior matches exactly; borders replicate


def test_shift_beyond_window_clamps_to_edge():
    layer = stand_layer(2)
    moved = shift_replicate(layer, 3, 0)
    dx, dy, score = best_offset(make_raster(moved), make_raster(layer), 2)
    assert (dx, dy) == (2, 0)
    assert score > 0.0


def test_score_matches_literal_oracle():
    layer = stand_layer(3)
    rng = np.random.default_rng(3)
    moved = (shift_replicate(layer, -1, 1)
             + rng.normal(0, 0.5, layer.shape)).astype(np.float32)
    moved = np.clip(moved, 0, 100)
    dx, dy, score = best_offset(make_raster(moved), make_raster(layer), 2)
    want = literal_msd(moved, layer, dx, dy)
    assert score == pytest.approx(want, rel=1e-12)
    # and the chosen offset really is the argmin over the whole window
    scores = {(ox, oy): literal_msd(moved, layer, ox, oy)
              for ox in range(-2, 3) for oy in range(-2, 3)}
    assert score == pytest.approx(min(scores.values()), rel=1e-12)


def test_constant_bias_does_not_change_offset():
    layer = stand_layer(4)
    moved = shift_replicate(layer, 2, 1)
    r0 = best_offset(make_raster(moved), make_raster(layer), 2)
    r1 = best_offset(make_raster(np.clip(moved + 3.0, 0, 100)),
                     make_raster(np.clip(layer + 3.0, 0, 100)), 2)
    assert r0[:2] == r1[:2]


def test_nodata_excluded_from_score():
    layer = stand_layer(5)
    holed = layer.copy()
    holed[5:9, 5:9] = DEFAULT_NODATA
    dx, dy, score = best_offset(make_raster(holed), make_raster(layer), 1)
    assert (dx, dy) == (0, 0)
    assert score == 0.0


def test_no_overlap_raises():
    a = make_raster(np.full((3, 3), DEFAULT_NODATA, dtype=np.float32))
    b = make_raster(np.full((3, 3), 5.0, dtype=np.float32))
    with pytest.raises(ValueError):
        best_offset(a, b, 1)


def test_config_invariants():
    with pytest.raises(ValueError):
        OffsetSearchConfig(window_radius=3, patch_overlap=4)  # needs >= 6
    with pytest.raises(ValueError):
        OffsetSearchConfig(patch_size=100, patch_overlap=64)


def test_patch_grid_covers_everything(meta32):
    cfg = OffsetSearchConfig(window_radius=2, patch_size=16, patch_overlap=6)
    spans = patch_grid(meta32, cfg)
    covered = np.zeros((32, 32), dtype=int)
    for y0, y1, x0, x1 in spans:
        covered[y0:y1, x0:x1] += 1
    assert covered.min() >= 1
    # row-major ordering of patches
    assert spans == sorted(spans)


def test_all_layers_identical_is_fixed_point():
    layer = stand_layer(6)
    cube = make_cube([layer, layer, layer])
    out, field = coregister_cube(cube, OffsetSearchConfig(patch_size=24,
                                                          patch_overlap=6))
    assert np.array_equal(out.values, cube.values)
    assert all(r.dx == 0 and r.dy == 0 for r in field.records)


def test_single_year_cube_passthrough():
    cube = make_cube([stand_layer(7)])
    out, field = coregister_cube(cube, OffsetSearchConfig(patch_size=24,
                                                          patch_overlap=6))
    assert np.array_equal(out.values, cube.values)
    assert field.records == ()


def test_synthetic_shifts_recovered_and_interior_exact():
    cfg = SynthConfig(seed=9, n_years=5, height=48, width=48, noise_sigma=0.0,
                      shifts=((1, -2), (-1, 0), (0, 0), (2, 2), (0, -1)))
    t = generate(cfg)
    out, field = coregister_cube(
        t.noisy_cube, OffsetSearchConfig(patch_size=48, patch_overlap=6))
    for i, year in enumerate(t.noisy_cube.years):
        recs = field.for_year(year)
        if i == 2:  # reference year: nothing to search
            assert recs == ()
        else:
            assert [(r.dx, r.dy) for r in recs] == [cfg.shifts[i]]
    interior = np.s_[:, 2:-2, 2:-2]
    assert np.array_equal(out.values[interior], t.clean_cube.values[interior])


def test_uncovered_border_becomes_nodata():
    cfg = SynthConfig(seed=10, n_years=3, height=24, width=24, noise_sigma=0.0,
                      shifts=((0, 0), (0, 0), (2, 0)))
    t = generate(cfg)
    out, _ = coregister_cube(
        t.noisy_cube, OffsetSearchConfig(patch_size=24, patch_overlap=6))
    # aligning the (dx=2) layer reads two columns past the right edge
    last = out.layer(2).values
    assert np.all(last[:, -2:] == np.float32(DEFAULT_NODATA))
    assert np.all(last[:, :-2] != np.float32(DEFAULT_NODATA))


def test_multi_patch_blend_is_exact_on_identical_copies():
    layer = stand_layer(11, size=40)
    cube = make_cube([layer, layer, layer])
    out, _ = coregister_cube(cube, OffsetSearchConfig(window_radius=2,
                                                      patch_size=20,
                                                      patch_overlap=8))
    # overlapping patches all contribute identical values; mean must be exact
    assert np.array_equal(out.values, cube.values)


def test_worker_count_invariance():
    cfg = SynthConfig(seed=12, n_years=4, height=40, width=40, noise_sigma=1.0,
                      shifts=((1, 1), (0, 0), (-2, 0), (0, 2)))
    t = generate(cfg)
    search = OffsetSearchConfig(window_radius=2, patch_size=20, patch_overlap=8)
    a, fa = coregister_cube(t.noisy_cube, search, workers=1)
    b, fb = coregister_cube(t.noisy_cube, search, workers=8)
    assert np.array_equal(a.values, b.values)
    assert fa.records == fb.records


def test_offsets_csv(tmp_path):
    cube = make_cube([stand_layer(13), stand_layer(13)])
    _, field = coregister_cube(cube, OffsetSearchConfig(patch_size=24,
                                                        patch_overlap=6))
    write_offsets_csv(field, tmp_path / "o.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "year,patch_x0,patch_y0,dx,dy,score"
    assert len(lines) == 1 + len(field.records)
