import dataclasses
import itertools
import math

import numpy as np
import pytest

from sasforge.errors import ConfigError, ParameterError, ValidationError
from sasforge.scene import (
    CameraSpec,
    CylinderTarget,
    Heightmap,
    LightArraySpec,
    LightsConfig,
    Scene,
    SceneConfig,
    SeafloorSpec,
    TargetsConfig,
    build_scene,
    chip_config,
    cone_weight,
    format_scene_config,
    parse_scene_config,
    sample_target_field,
    synthesize_heightmap,
    target_field_config,
)


# ---------------------------------------------------------------- heightmap

def test_zero_rms_gives_zero_grid():
    hm = synthesize_heightmap(SeafloorSpec(grid_size=64, rms_height_m=0.0))
    assert hm.grid.shape == (64, 64)
    assert np.all(hm.grid == 0.0)


def test_heightmap_is_deterministic():
    spec = SeafloorSpec(grid_size=65, rms_height_m=0.03, seed=17)
    a = synthesize_heightmap(spec).grid
    b = synthesize_heightmap(spec).grid
    assert np.array_equal(a, b)
    c = synthesize_heightmap(dataclasses.replace(spec, seed=18)).grid
    assert not np.array_equal(a, c)


def test_heightmap_rms_statistics():
    hm = synthesize_heightmap(SeafloorSpec(grid_size=512, extent_m=50.0, rms_height_m=0.05, seed=3))
    rms = np.sqrt(np.mean(hm.grid ** 2))
    assert 0.045 <= rms <= 0.055


@pytest.mark.parametrize("seed", range(3))
def test_heightmap_rms_within_ten_percent_large_grids(seed):
    hm = synthesize_heightmap(SeafloorSpec(grid_size=256, extent_m=30.0, rms_height_m=0.1, seed=seed))
    assert abs(np.sqrt(np.mean(hm.grid ** 2)) - 0.1) <= 0.01


@pytest.mark.parametrize(
    "kwargs",
    [dict(grid_size=1), dict(extent_m=0.0), dict(rms_height_m=-0.1), dict(correlation_length_m=0.0)],
)
def test_invalid_seafloor_spec(kwargs):
    with pytest.raises(ParameterError):
        synthesize_heightmap(SeafloorSpec(**kwargs))


def test_heightmap_bilinear_interpolation():
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    hm = Heightmap(grid, 1.0)
    # rows are y, columns are x
    assert hm.height(0.5, 0.5) == pytest.approx(1.5)
    assert hm.height(1.0, 0.0) == pytest.approx(1.0)
    assert hm.height(0.0, 1.0) == pytest.approx(2.0)
    assert hm.height(5.0, 5.0) == pytest.approx(3.0)


def test_heightmap_normal_on_plane():
    n = 33
    xs = np.linspace(0, 4.0, n)
    grid = 0.5 * xs[None, :] + 0.0 * xs[:, None]
    hm = Heightmap(grid, 4.0)
    nrm = hm.normal(np.array([1.3, 2.7]), np.array([0.4, 3.1]))
    want = np.array([-0.5, 0.0, 1.0]) / math.sqrt(1.25)
    assert np.allclose(nrm, want, atol=1e-12)


def test_heightmap_rejects_bad_grids():
    with pytest.raises(ValidationError):
        Heightmap(np.zeros((3, 4)), 1.0)
    with pytest.raises(ValidationError):
        Heightmap(np.array([[0.0, np.nan], [0.0, 0.0]]), 1.0)


# ---------------------------------------------------------------- targets

def test_target_field_count_60_by_5():
    targets = sample_target_field(60.0, 5.0, seed=0)
    assert len(targets) == 144
    xs = sorted({t.center_xy_m[0] for t in targets})
    assert len(xs) == 12
    assert xs[0] == pytest.approx(2.5) and xs[-1] == pytest.approx(57.5)


def test_target_field_single_cell():
    targets = sample_target_field(5.0, 5.0, seed=1)
    assert len(targets) == 1
    assert targets[0].center_xy_m == pytest.approx((2.5, 2.5))


def test_target_field_seeds_change_attributes_only():
    a = sample_target_field(30.0, 5.0, seed=1)
    b = sample_target_field(30.0, 5.0, seed=2)
    assert [t.center_xy_m for t in a] == [t.center_xy_m for t in b]
    assert [t.yaw_rad for t in a] != [t.yaw_rad for t in b]
    assert [t.burial_frac for t in a] != [t.burial_frac for t in b]
    assert sample_target_field(30.0, 5.0, seed=1) == a


def test_target_field_attribute_ranges():
    ts = sample_target_field(60.0, 5.0, seed=4, burial_range=(0.1, 0.3))
    yaws = np.array([t.yaw_rad for t in ts])
    burials = np.array([t.burial_frac for t in ts])
    assert np.all((yaws >= 0) & (yaws < 2 * np.pi))
    assert np.all((burials >= 0.1) & (burials <= 0.3))


def test_target_field_no_overlap():
    length, radius = 2.0, 0.25
    spacing = 2.0 * max(length, 2 * radius)
    ts = sample_target_field(40.0, spacing, seed=5, length_m=length, radius_m=radius)
    for a, b in itertools.combinations(ts, 2):
        d = math.dist(a.center_xy_m, b.center_xy_m)
        assert d >= spacing - 1e-9


@pytest.mark.parametrize("spacing", [0.0, -1.0, 61.0])
def test_target_field_bad_spacing(spacing):
    with pytest.raises(ParameterError):
        sample_target_field(60.0, spacing, seed=0)


def test_cylinder_invariants():
    with pytest.raises(ValidationError):
        CylinderTarget((0, 0), burial_frac=1.2).validate()
    with pytest.raises(ValidationError):
        CylinderTarget((0, 0), length_m=0.0).validate()
    with pytest.raises(ValidationError):
        CylinderTarget((0, 0), radius_m=-1.0).validate()


# ---------------------------------------------------------------- lights and camera

def test_cone_weight_gating():
    half = math.radians(60)
    assert cone_weight(1.0, half) == pytest.approx(1.0)
    assert cone_weight(math.cos(math.radians(30)), half) == pytest.approx(math.cos(math.pi / 4))
    assert cone_weight(math.cos(math.radians(61)), half) == 0.0


def test_light_positions():
    la = LightArraySpec(3, (0.0, -1.0), (0.0, 1.0), 5.0)
    pos = la.positions()
    assert np.allclose(pos, [[0, -1, 5], [0, 0, 5], [0, 1, 5]])
    one = LightArraySpec(1, (0.0, -1.0), (2.0, 1.0), 5.0)
    assert np.allclose(one.positions(), [[1.0, 0.0, 5.0]])


@pytest.mark.parametrize(
    "kwargs",
    [dict(count=0), dict(altitude_m=0.0), dict(cone_half_angle_rad=0.0), dict(cone_half_angle_rad=math.pi / 2)],
)
def test_light_invariants(kwargs):
    base = dict(count=2, track_start_m=(0, 0), track_end_m=(0, 1), altitude_m=1.0)
    base.update(kwargs)
    with pytest.raises(ValidationError):
        LightArraySpec(**base).validate()


def test_camera_pixel_mapping_round_trip():
    cam = CameraSpec((4.0, 4.0), 6.4, 64)
    x, y = cam.to_world(10, 20)
    assert (x, y) == pytest.approx((0.8 + 20.5 * 0.1, 0.8 + 10.5 * 0.1))
    r, c = cam.to_pixel(x, y)
    assert (r, c) == pytest.approx((10, 20))
    with pytest.raises(ValidationError):
        CameraSpec((0, 0), 1.0, 8).validate()


# ---------------------------------------------------------------- scene building

def test_default_light_altitude_is_tenth_of_max_range():
    cfg = target_field_config(seed=0, pixels=64)
    cfg.seafloor = dataclasses.replace(cfg.seafloor, grid_size=65)
    scene = build_scene(cfg)
    assert scene.lights.altitude_m == pytest.approx(15.0)
    assert len(scene.targets) == 144


def test_barren_scene_is_valid():
    cfg = chip_config(64, seed=2)
    scene = build_scene(cfg)
    assert scene.targets == ()


def test_burial_out_of_range_is_rejected():
    cfg = chip_config(64, seed=0, target=(0.0, 0.0, 0.0, 1.2))
    with pytest.raises(ValidationError):
        build_scene(cfg)


def test_target_outside_extent_is_listed():
    cfg = chip_config(64, seed=0)
    cfg.targets.items = [(4.0, 4.0, 0.0, 0.0), (9.5, 1.0, 0.0, 0.0)]
    with pytest.raises(ValidationError, match=r"target 1 at \(9.5, 1\)"):
        build_scene(cfg)


def test_auto_exposure_sets_flat_floor_radiance():
    from sasforge.scene import flat_floor_response

    scene = build_scene(chip_config(64, seed=0))
    resp = flat_floor_response(scene.lights, scene.camera.center_xy_m)
    assert scene.lights.intensity * resp == pytest.approx(LightsConfig().exposure)


def test_light_track_runs_along_y_short_of_camera():
    scene = build_scene(chip_config(64, seed=0))
    pos = scene.lights.positions()
    assert np.allclose(pos[:, 0], 4.0 - 30.0)
    assert pos[0, 1] < pos[-1, 1]
    assert scene.lights.altitude_m == pytest.approx(6.0)


def test_scene_serialization_round_trip():
    scene = build_scene(chip_config(64, seed=9, target=(0.3, -0.2, 1.1, 0.25)))
    again = Scene.from_dict(scene.to_dict())
    assert again == scene
    assert np.array_equal(again.heightmap.grid, scene.heightmap.grid)


def test_scene_is_immutable():
    scene = build_scene(chip_config(64, seed=1))
    with pytest.raises(dataclasses.FrozenInstanceError):
        scene.background_noise_sigma = 1.0
    with pytest.raises(ValueError):
        scene.heightmap.grid[0, 0] = 1.0


# ---------------------------------------------------------------- config text

def test_config_text_round_trip():
    cfg = SceneConfig(
        seafloor=SeafloorSpec(65, 8.0, 0.01, 0.4, 7),
        targets=TargetsConfig(length_m=1.5, items=[(4.0, 4.0, 0.3, 0.1), (3.0, 5.0, 2.0, 0.0)]),
        lights=LightsConfig(count=8, max_range_m=100.0, track_start_m=(-40.0, -10.0), track_end_m=(-40.0, 10.0)),
    )
    text = format_scene_config(cfg)
    assert parse_scene_config(text) == cfg


def test_config_parse_example():
    text = """
[seafloor]
grid_size = 33
rms_height_m = 0.01

[lights]
count = 4
max_range_m = 150

[targets]
target.0 = 4.0, 4.0, 0.5, 0.2
"""
    cfg = parse_scene_config(text)
    assert cfg.seafloor.grid_size == 33
    assert cfg.lights.max_range_m == 150.0
    assert cfg.targets.items == [(4.0, 4.0, 0.5, 0.2)]


@pytest.mark.parametrize(
    "text",
    ["[seafloor]\nbogus = 1\n", "[unknown]\nx = 1\n", "[camera]\npixels = lots\n"],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_scene_config(text)
