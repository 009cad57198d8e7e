import hashlib

import pytest

from canopycube.config import pipeline_config_from_mapping
from canopycube.pipeline import StageError, run_pipeline, write_manifest
from canopycube.polygons import read_geojson, write_geojson
from canopycube.raster import GridMeta, HeightRaster, write_cube, write_raster
from canopycube.synth import DisturbanceEvent, SynthConfig, generate

import numpy as np


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    """Noise-free scene with known shifts and two interior disturbances."""
    root = tmp_path_factory.mktemp("scene")
    cfg = SynthConfig(
        seed=7, n_years=4, height=48, width=48, noise_sigma=0.0,
        shifts=((1, 0), (0, -1), (0, 0), (-1, 1)),  # reference year stays put
        events=(
            DisturbanceEvent(year=2015, row=8, col=8, rect=(5, 6), drop_m=12.0),
            DisturbanceEvent(year=2016, row=28, col=20, radius_px=4, drop_m=15.0),
        ),
    )
    truth = generate(cfg)
    write_cube(truth.noisy_cube, root / "noisy")
    write_geojson(truth.true_polygons, root / "true_polygons.geojson")
    return root


def mapping_for(scene, out, **extra):
    raw = {
        "input.cube_dir": str(scene / "noisy"),
        "output.dir": str(out),
        "tv.skip": "true",
    }
    raw.update({k: str(v) for k, v in extra.items()})
    return raw


def assert_same_geometry(got_path, want_path):
    got = read_geojson(got_path)
    want = read_geojson(want_path)
    assert len(got.polygons) == len(want.polygons)
    for a, b in zip(got.polygons, want.polygons):
        assert a.year == b.year
        assert a.area_m2 == b.area_m2
        assert np.array_equal(a.exterior, b.exterior)
        assert len(a.holes) == len(b.holes)


def test_pipeline_recovers_truth_polygons(scene, tmp_path):
    cfg = pipeline_config_from_mapping(mapping_for(scene, tmp_path / "run"))
    manifest = run_pipeline(cfg)
    assert manifest.name == "manifest.txt"
    assert_same_geometry(tmp_path / "run" / "delta" / "polygons.geojson",
                         scene / "true_polygons.geojson")
    assert (tmp_path / "run" / "coregister" / "offsets.csv").exists()
    assert not (tmp_path / "run" / "denoise").exists()


def test_manifest_identical_across_runs_and_workers(scene, tmp_path):
    texts = []
    for name, workers in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / name
        cfg = pipeline_config_from_mapping(
            mapping_for(scene, out, **{"run.workers": workers}))
        manifest = run_pipeline(cfg)
        texts.append(manifest.read_text())
    assert texts[0] == texts[1] == texts[2]


def test_pipeline_with_denoise_stage(scene, tmp_path):
    out = tmp_path / "run"
    cfg = pipeline_config_from_mapping({
        "input.cube_dir": str(scene / "noisy"),
        "output.dir": str(out),
        "tv.max_iters": "60",
    })
    run_pipeline(cfg)
    assert (out / "denoise" / "year_2014.f32").exists()
    # 12 m and 15 m drops survive mild smoothing against the 5 m threshold
    assert_same_geometry(out / "delta" / "polygons.geojson",
                         scene / "true_polygons.geojson")


def test_metrics_stage_outputs(scene, tmp_path):
    out = tmp_path / "run"
    raw = mapping_for(
        scene, out,
        **{"metrics.reference_polygons": str(scene / "true_polygons.geojson")})
    cfg = pipeline_config_from_mapping(raw)
    run_pipeline(cfg)
    area_csv = (out / "metrics" / "area_metrics.csv").read_text()
    assert "1.0" in area_csv  # perfect self-agreement
    assert (out / "metrics" / "pr_curve.csv").exists()


def test_failed_stage_is_quarantined(scene, tmp_path):
    out = tmp_path / "run"
    bad_mask = HeightRaster(
        meta=GridMeta(origin_x=0, origin_y=0, pixel_size=1.5, width=8, height=8),
        values=np.ones((8, 8), dtype=np.float32))
    write_raster(bad_mask, tmp_path / "mask")
    cfg = pipeline_config_from_mapping(
        mapping_for(scene, out,
                    **{"delta.forest_mask": str(tmp_path / "mask.hdr")}))
    with pytest.raises(StageError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "delta"
    assert "delta" in str(err.value)
    assert (out / "failed" / "delta").is_dir()
    assert not (out / "delta").exists()
    assert (out / "coregister" / "offsets.csv").exists()  # earlier stages kept
    assert not (out / "manifest.txt").exists()


def test_write_manifest_contents(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "b.txt").write_bytes(b"beta")
    (tmp_path / "sub" / "a.txt").write_bytes(b"alpha")
    manifest = write_manifest(tmp_path)
    lines = manifest.read_text().splitlines()
    assert lines == [
        f"{hashlib.sha256(b'beta').hexdigest()}  b.txt",
        f"{hashlib.sha256(b'alpha').hexdigest()}  sub/a.txt",
    ]
    # rewriting does not hash the manifest itself
    assert write_manifest(tmp_path).read_text() == "\n".join(lines) + "\n"
