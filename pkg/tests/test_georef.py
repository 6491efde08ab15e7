import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdmesa.grids import FormatError
from crowdmesa.georef import (
    DEFAULT_EPSG,
    NODATA,
    CameraPose,
    GridSpec,
    Homography,
    NoIntersectionError,
    WorldGrid,
    export_world_grid,
    fit_homography,
    frame_interval,
    import_esri_ascii,
    pixel_to_world,
    read_mapping,
    rectify_density,
    rectify_motion,
    world_to_pixel,
    write_mapping,
)
from oracles import apply_homography, ray_plane

# pixel (u, v) -> (east = u, north = -v): image rows run north to south
FLIP = Homography(np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]]))


def test_fit_identity_and_scale():
    rng = np.random.default_rng(0)
    px = rng.uniform(0, 100, (8, 2))
    h = fit_homography(px, px)
    assert np.allclose(h.matrix, np.eye(3), atol=1e-9) and h.rms < 1e-9
    h2 = fit_homography(px, 2 * px)
    assert np.allclose(h2.matrix, np.diag([2.0, 2.0, 1.0]), atol=1e-9) and h2.rms < 1e-6


def test_fit_random_homography_against_oracle():
    rng = np.random.default_rng(1)
    m = np.array([[0.05, 0.01, 500000.0], [0.002, -0.04, 5300000.0], [1e-5, 2e-5, 1.0]])
    px = rng.uniform(0, 1000, (20, 2))
    world = np.array([apply_homography(m, x, y) for x, y in px])
    h = fit_homography(px, world)
    for x, y in rng.uniform(0, 1000, (50, 2)):
        assert np.allclose(pixel_to_world(h, (x, y)), apply_homography(m, x, y), rtol=0, atol=1e-6)


def test_fit_degenerate_inputs():
    px = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    with pytest.raises(ValueError):
        fit_homography(px[:3], px[:3])
    with pytest.raises(ValueError, match="degenerate"):
        fit_homography(np.array([[0, 0], [0, 0], [0, 1], [1, 1]], dtype=float), px)
    with pytest.raises(ValueError, match="collinear"):
        fit_homography(np.array([[0, 0], [1, 1], [2, 2], [0, 1]], dtype=float), px)
    with pytest.raises(ValueError):
        fit_homography(px, px[:3])


def test_homography_normalization_and_singularity():
    h = Homography(np.eye(3) * 4)
    assert h.matrix[2, 2] == 1.0
    with pytest.raises(ValueError):
        Homography(np.ones((3, 3)))
    with pytest.raises(ValueError):
        Homography(np.diag([1.0, 1.0, 0.0]))


def test_point_at_infinity_rejected():
    h = Homography(np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 1.0]]))
    with pytest.raises(NoIntersectionError):
        pixel_to_world(h, (-1.0, 5.0))


def test_pixel_world_round_trip_1000_points():
    rng = np.random.default_rng(2)
    m = np.array([[0.05, 0.01, 500000.0], [0.002, -0.04, 5300000.0], [1e-5, 2e-5, 1.0]])
    h = Homography(m)
    pts = rng.uniform(0, 1440, (1000, 2))
    e, n, ok = h.to_world(pts[:, 0], pts[:, 1])
    u, v, ok2 = h.to_pixel(e, n)
    assert ok.all() and ok2.all()
    assert np.abs(np.stack([u, v], 1) - pts).max() <= 1e-6


def nadir(height=100.0, focal=1000.0, terrain=0.0):
    return CameraPose((1000.0, 2000.0, terrain + height), (0.0, 0.0, 0.0), focal, (320.0, 240.0), terrain)


def test_nadir_pose_examples():
    p = nadir()
    assert np.allclose(pixel_to_world(p, (320.0, 240.0)), (1000.0, 2000.0))
    e, n = pixel_to_world(p, (420.0, 240.0))
    assert e == pytest.approx(1010.0) and n == pytest.approx(2000.0)
    e, n = pixel_to_world(p, (320.0, 340.0))
    assert n == pytest.approx(1990.0)  # image rows run southwards
    assert np.allclose(pixel_to_world(nadir(terrain=35.0), (420.0, 240.0)), (1010.0, 2000.0))


def test_horizontal_ray_has_no_intersection():
    p = CameraPose((0.0, 0.0, 50.0), (np.pi / 2, 0.0, 0.0), 800.0, (320.0, 240.0))
    with pytest.raises(NoIntersectionError):
        pixel_to_world(p, (320.0, 240.0))


def test_pose_against_ray_plane_oracle_and_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pose = CameraPose((rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(60, 200)),
                          tuple(rng.uniform(-0.3, 0.3, 3)), rng.uniform(500, 2000), (320.0, 240.0),
                          rng.uniform(-5, 5))
        for u, v in rng.uniform(0, 640, (5, 2)):
            ref = ray_plane(pose.center, pose.rotation, pose.focal, pose.principal_point,
                            pose.terrain_height, u, v)
            got = pixel_to_world(pose, (u, v))
            assert np.allclose(got, ref, atol=1e-8)
            assert np.allclose(world_to_pixel(pose, got), (u, v), atol=1e-6)


def test_pose_validation():
    with pytest.raises(ValueError):
        CameraPose((0, 0, 10.0), (0, 0, 0), 0.0, (0, 0))
    with pytest.raises(ValueError):
        CameraPose((0, 0, 10.0), (0, 0, 0), 100.0, (0, 0), terrain_height=10.0)


def test_mapping_files_round_trip(tmp_path):
    h = Homography(np.array([[0.05, 0.01, 500000.1], [0.002, -0.04, 5300000.0], [1e-5, 2e-5, 1.0]]))
    write_mapping(tmp_path / "h.txt", h)
    assert np.array_equal(read_mapping(tmp_path / "h.txt").matrix, h.matrix)
    p = CameraPose((1.5, 2.5, 100.25), (0.1, -0.2, 0.3), 1234.5, (320.5, 240.5), 3.0)
    write_mapping(tmp_path / "p.txt", p)
    assert read_mapping(tmp_path / "p.txt") == p
    (tmp_path / "bad.txt").write_text("HOMOG 2\n1 0 0 0 1 0 0 0 1\n")
    with pytest.raises(FormatError, match="version"):
        read_mapping(tmp_path / "bad.txt")
    (tmp_path / "short.txt").write_text("POSE 1\n1 2 3\n")
    with pytest.raises(FormatError):
        read_mapping(tmp_path / "short.txt")


def test_rectify_identity_mapping_reproduces_input():
    rng = np.random.default_rng(4)
    d = rng.random((6, 9))
    spec = GridSpec(0.0, 0.0, 1.0, 9, 6)
    wg = rectify_density(d, FLIP, spec, sigma_w=0)
    assert np.array_equal(wg.values, d)


def test_two_pixels_in_one_cell_are_summed():
    d = np.array([[0.3, 0.7]])
    spec = GridSpec(0.0, 0.0, 2.0, 1, 1)
    assert rectify_density(d, FLIP, spec, sigma_w=0).values[0, 0] == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 3.0))
def test_rectify_conserves_mass_and_stays_nonnegative(seed, sigma_w):
    rng = np.random.default_rng(seed)
    m = np.array([[rng.uniform(0.02, 0.08), rng.uniform(-0.01, 0.01), 100.0],
                  [rng.uniform(-0.01, 0.01), -rng.uniform(0.02, 0.08), 200.0],
                  [rng.uniform(-2e-4, 2e-4), rng.uniform(-2e-4, 2e-4), 1.0]])
    h = Homography(m)
    d = rng.random((30, 40)) * rng.uniform(0.01, 10)
    yy, xx = np.mgrid[0:30, 0:40] + 0.5
    e, n, _ = h.to_world(xx, yy)
    spec = GridSpec.covering(e, n, 0.25)
    wg = rectify_density(d, h, spec, sigma_w)
    assert wg.meta["outside_pixels"] == 0
    assert abs(wg.values.sum() - d.sum()) <= 1e-6 * d.sum()
    assert np.all(wg.values >= 0)


def test_rectify_reports_out_of_grid_mass():
    d = np.ones((4, 4))
    wg = rectify_density(d, FLIP, GridSpec(0.0, 0.0, 1.0, 2, 4), sigma_w=1.0)
    assert wg.meta["outside_pixels"] == 8 and wg.meta["outside_mass"] == 8.0
    assert wg.values.sum() == pytest.approx(8.0, rel=1e-12)
    with pytest.raises(ValueError):
        rectify_density(d, FLIP, GridSpec(100.0, 100.0, 1.0, 2, 2))


def test_motion_static_camera_zero_flow():
    spec = GridSpec(0.0, 0.0, 1.0, 8, 6)
    wg = rectify_motion(np.zeros((6, 8, 2)), FLIP, FLIP, 0.4, spec)
    assert np.all(wg.values == 0)


def test_motion_metric_speed_and_nodata():
    assert frame_interval(10, 25.0) == pytest.approx(0.4)
    # 0.1 m per pixel; 10 px flow = 1.0 m over dt = 0.4 s
    h = Homography(np.array([[0.1, 0, 0], [0, -0.1, 0], [0, 0, 1.0]]))
    f = np.zeros((10, 10, 2))
    f[:, :, 0] = 10.0
    spec = GridSpec(0.0, 0.0, 0.5, 4, 2)  # 2 m x 1 m, smaller than the 1 m x 1 m footprint in x
    wg = rectify_motion(f, h, h, frame_interval(10, 25.0), spec)
    speed = np.hypot(wg.values[..., 0], wg.values[..., 1])[wg.valid]
    assert np.allclose(speed, 2.5, rtol=1e-12)
    assert np.all(wg.values[:, 2:] == NODATA)
    with pytest.raises(ValueError):
        rectify_motion(f, h, h, 0.0, spec)


def test_export_single_cell_and_reimport(tmp_path):
    wg = WorldGrid(GridSpec(500000.0, 5300000.0, 0.25, 1, 1), np.array([[5.0]]))
    export_world_grid(wg, tmp_path / "g.asc")
    lines = (tmp_path / "g.asc").read_text().splitlines()
    assert lines[-1] == "5" and lines[0] == "ncols 1" and lines[5].startswith("NODATA_value")
    assert (tmp_path / "g.prj").read_text().strip() == f"EPSG:{DEFAULT_EPSG}"
    back = import_esri_ascii(tmp_path / "g.asc")
    assert back.spec.epsg == 32633 and back.values[0, 0] == 5.0


def test_export_round_trip_17_digits_and_geojson(tmp_path):
    rng = np.random.default_rng(5)
    vals = rng.normal(size=(5, 7)) * 10.0 ** rng.integers(-8, 8, (5, 7))
    vals[0, 0] = NODATA
    spec = GridSpec(512345.125, 5298765.5, 0.25, 7, 5, epsg=32632)
    export_world_grid(WorldGrid(spec, vals), tmp_path / "r.asc")
    back = import_esri_ascii(tmp_path / "r.asc")
    assert back.values.tobytes() == vals.tobytes()
    assert back.spec == spec
    export_world_grid(WorldGrid(spec, vals), tmp_path / "r.geojson", "geojson_points")
    doc = json.loads((tmp_path / "r.geojson").read_text())
    assert len(doc["features"]) == 34 and "32632" in doc["crs"]["properties"]["name"]
    f0 = doc["features"][0]
    assert f0["geometry"]["coordinates"] == [512345.125 + 0.375, 5298765.5 - 0.125]
    with pytest.raises(ValueError):
        export_world_grid(WorldGrid(spec, vals), tmp_path / "x", "kml")


def test_multichannel_export_writes_one_file_per_channel(tmp_path):
    spec = GridSpec(0.0, 10.0, 1.0, 3, 2)
    vals = np.arange(12.0).reshape(2, 3, 2)
    paths = export_world_grid(WorldGrid(spec, vals), tmp_path / "v.asc")
    assert {p.name for p in paths} == {"v_0.asc", "v_0.prj", "v_1.asc", "v_1.prj"}
    assert np.array_equal(import_esri_ascii(tmp_path / "v_1.asc").values, vals[:, :, 1])


def test_import_rejects_malformed(tmp_path):
    (tmp_path / "b.asc").write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n")
    with pytest.raises(FormatError):
        import_esri_ascii(tmp_path / "b.asc")


def test_grid_spec_covering_contains_points():
    rng = np.random.default_rng(6)
    e, n = rng.uniform(100, 120, 50), rng.uniform(200, 230, 50)
    spec = GridSpec.covering(e, n, 0.25)
    _, _, inside = spec.cell_of(e, n)
    assert inside.all()
    with pytest.raises(ValueError):
        GridSpec(0, 0, 0.0, 1, 1)
