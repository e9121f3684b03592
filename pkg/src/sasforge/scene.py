"""Declarative sonar scene: seafloor heightmap, cylinder targets, light array, camera.

Coordinates: x is across-track (range), y is along-track, z is up. The
heightmap covers ``[0, extent_m]`` in x and y with ``grid[i, j]`` the height
at ``(x=j*cell, y=i*cell)``. Image rows follow y and columns follow x.
"""

from __future__ import annotations

import base64
import configparser
import dataclasses
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParameterError, ValidationError


# ------------------------------------------------------------------ seafloor

@dataclass(frozen=True)
class SeafloorSpec:
    grid_size: int = 129
    extent_m: float = 8.0
    rms_height_m: float = 0.02
    correlation_length_m: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if int(self.grid_size) != self.grid_size or self.grid_size < 2:
            raise ParameterError(f"grid_size must be an integer >= 2, got {self.grid_size}")
        if not self.extent_m > 0:
            raise ParameterError(f"extent_m must be > 0, got {self.extent_m}")
        if not self.rms_height_m >= 0:
            raise ParameterError(f"rms_height_m must be >= 0, got {self.rms_height_m}")
        if not self.correlation_length_m > 0:
            raise ParameterError(f"correlation_length_m must be > 0, got {self.correlation_length_m}")


class Heightmap:
    """Square grid of seafloor heights with bilinear interpolation."""

    def __init__(self, grid: np.ndarray, extent_m: float):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1] or grid.shape[0] < 2:
            raise ValidationError(f"heightmap grid must be square with side >= 2, got {grid.shape}")
        if not np.all(np.isfinite(grid)):
            raise ValidationError("heightmap contains non-finite heights")
        if not extent_m > 0:
            raise ValidationError(f"heightmap extent must be > 0, got {extent_m}")
        self.grid = grid
        self.grid.flags.writeable = False
        self.extent_m = float(extent_m)
        n = grid.shape[0]
        self.cell_m = self.extent_m / (n - 1)
        self.hmin = float(grid.min())
        self.hmax = float(grid.max())
        gy, gx = np.gradient(grid, self.cell_m)
        self._gx = gx
        self._gy = gy
        # bound on the horizontal slope of the bilinear surface
        kx = np.abs(np.diff(grid, axis=1)).max() / self.cell_m
        ky = np.abs(np.diff(grid, axis=0)).max() / self.cell_m
        self.slope_bound = float(np.hypot(kx, ky))

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Heightmap)
            and self.extent_m == other.extent_m
            and np.array_equal(self.grid, other.grid)
        )

    def __repr__(self) -> str:
        return f"Heightmap(size={self.size}, extent_m={self.extent_m})"

    def _cell(self, x, y):
        n = self.size
        u = np.clip(np.asarray(x, dtype=np.float64) / self.cell_m, 0.0, n - 1)
        v = np.clip(np.asarray(y, dtype=np.float64) / self.cell_m, 0.0, n - 1)
        j = np.minimum(np.floor(u).astype(np.intp), n - 2)
        i = np.minimum(np.floor(v).astype(np.intp), n - 2)
        return i, j, u - j, v - i

    @staticmethod
    def _lerp(field_, i, j, fu, fv):
        a = field_[i, j]
        b = field_[i, j + 1]
        c = field_[i + 1, j]
        d = field_[i + 1, j + 1]
        return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv

    def height(self, x, y):
        """Bilinear height at (x, y); positions outside the extent are clamped to the edge."""
        i, j, fu, fv = self._cell(x, y)
        return self._lerp(self.grid, i, j, fu, fv)

    def normal(self, x, y) -> np.ndarray:
        """Unit normals from bilinearly interpolated central-difference slopes, shape (..., 3)."""
        i, j, fu, fv = self._cell(x, y)
        hx = self._lerp(self._gx, i, j, fu, fv)
        hy = self._lerp(self._gy, i, j, fu, fv)
        n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def contains(self, x, y):
        return (x >= 0) & (x <= self.extent_m) & (y >= 0) & (y <= self.extent_m)


def synthesize_heightmap(spec: SeafloorSpec) -> Heightmap:
    """Stationary Gaussian random field with Gaussian correlation, scaled to the target rms.

    White noise is shaped in the frequency domain by the square root of the
    Gaussian power spectrum ``exp(-k^2 l^2 / 4)``, then centred and rescaled so
    the grid rms equals ``rms_height_m`` exactly.
    """
    spec.validate()
    n = int(spec.grid_size)
    if spec.rms_height_m == 0:
        return Heightmap(np.zeros((n, n)), spec.extent_m)
    rng = np.random.default_rng(np.uint64(spec.seed))
    white = rng.standard_normal((n, n))
    cell = spec.extent_m / (n - 1)
    k = 2 * np.pi * np.fft.fftfreq(n, d=cell)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    amp = np.exp(-k2 * spec.correlation_length_m ** 2 / 8.0)
    field_ = np.real(np.fft.ifft2(np.fft.fft2(white) * amp))
    field_ -= field_.mean()
    rms = np.sqrt(np.mean(field_ ** 2))
    if rms == 0:
        return Heightmap(np.zeros((n, n)), spec.extent_m)
    return Heightmap(field_ * (spec.rms_height_m / rms), spec.extent_m)


# ------------------------------------------------------------------ targets, lights, camera

@dataclass(frozen=True)
class CylinderTarget:
    center_xy_m: tuple[float, float]
    length_m: float = 2.0
    radius_m: float = 0.25
    yaw_rad: float = 0.0
    burial_frac: float = 0.0
    roughness_amp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center_xy_m", tuple(float(v) for v in self.center_xy_m))

    def validate(self) -> None:
        if not self.length_m > 0:
            raise ValidationError(f"target length_m must be > 0, got {self.length_m}")
        if not self.radius_m > 0:
            raise ValidationError(f"target radius_m must be > 0, got {self.radius_m}")
        if not 0.0 <= self.burial_frac <= 1.0:
            raise ValidationError(f"target burial_frac must be in [0, 1], got {self.burial_frac}")
        if self.roughness_amp < 0:
            raise ValidationError(f"target roughness_amp must be >= 0, got {self.roughness_amp}")


def sample_target_field(
    extent_m: float,
    spacing_m: float,
    seed: int,
    length_m: float = 2.0,
    radius_m: float = 0.25,
    roughness_amp: float = 0.0,
    burial_range: tuple[float, float] = (0.0, 0.5),
) -> list[CylinderTarget]:
    """Targets on a regular grid of pitch ``spacing_m`` centred in the extent.

    Each side holds ``floor(extent / spacing)`` targets. Positions depend only
    on the geometry; yaw (uniform in [0, 2pi)) and burial fraction (uniform
    in ``burial_range``) come from ``seed``.
    """
    if not spacing_m > 0:
        raise ParameterError(f"spacing_m must be > 0, got {spacing_m}")
    if spacing_m > extent_m:
        raise ParameterError(f"spacing_m {spacing_m} exceeds extent_m {extent_m}")
    per_side = int(math.floor(extent_m / spacing_m + 1e-9))
    offset = (extent_m - per_side * spacing_m) / 2.0
    rng = np.random.default_rng(np.uint64(seed))
    lo, hi = burial_range
    targets = []
    for i in range(per_side):
        for j in range(per_side):
            center = (offset + (j + 0.5) * spacing_m, offset + (i + 0.5) * spacing_m)
            targets.append(
                CylinderTarget(
                    center,
                    length_m,
                    radius_m,
                    yaw_rad=float(rng.uniform(0.0, 2 * np.pi)),
                    burial_frac=float(rng.uniform(lo, hi)),
                    roughness_amp=roughness_amp,
                )
            )
    return targets


def cone_weight(cos_angle, cone_half_angle_rad: float):
    """Beam weight from the cosine of the off-axis angle.

    Zero beyond the half-angle, smooth cosine falloff ``cos(pi/2 * angle / half)``
    inside it.
    """
    ang = np.arccos(np.clip(cos_angle, -1.0, 1.0))
    w = np.cos(0.5 * np.pi * ang / cone_half_angle_rad)
    return np.where(ang < cone_half_angle_rad, w, 0.0)


@dataclass(frozen=True)
class LightArraySpec:
    count: int
    track_start_m: tuple[float, float]
    track_end_m: tuple[float, float]
    altitude_m: float
    cone_half_angle_rad: float = math.radians(88.0)
    intensity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "track_start_m", tuple(float(v) for v in self.track_start_m))
        object.__setattr__(self, "track_end_m", tuple(float(v) for v in self.track_end_m))

    def validate(self) -> None:
        if int(self.count) != self.count or self.count < 1:
            raise ValidationError(f"light count must be an integer >= 1, got {self.count}")
        if not self.altitude_m > 0:
            raise ValidationError(f"light altitude_m must be > 0, got {self.altitude_m}")
        if not 0 < self.cone_half_angle_rad < np.pi / 2:
            raise ValidationError(f"cone_half_angle_rad must be in (0, pi/2), got {self.cone_half_angle_rad}")
        if self.intensity < 0:
            raise ValidationError(f"light intensity must be >= 0, got {self.intensity}")

    def positions(self) -> np.ndarray:
        """Source positions, shape (count, 3), evenly spaced along the track."""
        a = np.array(self.track_start_m)
        b = np.array(self.track_end_m)
        if self.count == 1:
            xy = ((a + b) / 2.0)[None]
        else:
            s = np.linspace(0.0, 1.0, int(self.count))[:, None]
            xy = a + s * (b - a)
        return np.column_stack([xy, np.full(len(xy), float(self.altitude_m))])

    def centroid(self) -> np.ndarray:
        return self.positions().mean(axis=0)


@dataclass(frozen=True)
class CameraSpec:
    center_xy_m: tuple[float, float]
    footprint_m: float = 6.4
    pixels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "center_xy_m", tuple(float(v) for v in self.center_xy_m))

    def validate(self) -> None:
        if not self.footprint_m > 0:
            raise ValidationError(f"camera footprint_m must be > 0, got {self.footprint_m}")
        if int(self.pixels) != self.pixels or self.pixels < 16:
            raise ValidationError(f"camera pixels must be an integer >= 16, got {self.pixels}")

    @property
    def pixel_m(self) -> float:
        return self.footprint_m / self.pixels

    @property
    def origin_xy_m(self) -> tuple[float, float]:
        half = self.footprint_m / 2.0
        return self.center_xy_m[0] - half, self.center_xy_m[1] - half

    def to_pixel(self, x, y):
        """(row, col) continuous pixel coordinates of a world point; pixel centres are integers."""
        x0, y0 = self.origin_xy_m
        return (np.asarray(y) - y0) / self.pixel_m - 0.5, (np.asarray(x) - x0) / self.pixel_m - 0.5

    def to_world(self, row, col):
        x0, y0 = self.origin_xy_m
        return x0 + (np.asarray(col) + 0.5) * self.pixel_m, y0 + (np.asarray(row) + 0.5) * self.pixel_m


@dataclass(frozen=True, eq=False)
class Scene:
    heightmap: Heightmap
    targets: tuple[CylinderTarget, ...]
    lights: LightArraySpec
    camera: CameraSpec
    background_noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.heightmap == other.heightmap
            and self.targets == other.targets
            and self.lights == other.lights
            and self.camera == other.camera
            and self.background_noise_sigma == other.background_noise_sigma
        )

    def validate(self) -> None:
        self.lights.validate()
        self.camera.validate()
        if self.background_noise_sigma < 0:
            raise ValidationError(f"background_noise_sigma must be >= 0, got {self.background_noise_sigma}")
        bad = []
        for k, t in enumerate(self.targets):
            t.validate()
            x, y = t.center_xy_m
            if not self.heightmap.contains(x, y):
                bad.append(f"target {k} at ({x:g}, {y:g})")
        if bad:
            raise ValidationError(
                f"targets outside the heightmap extent [0, {self.heightmap.extent_m:g}] m: " + "; ".join(bad)
            )
        x0, y0 = self.camera.origin_xy_m
        e = self.heightmap.extent_m
        x1, y1 = x0 + self.camera.footprint_m, y0 + self.camera.footprint_m
        tol = 1e-9
        if x0 < -tol or y0 < -tol or x1 > e + tol or y1 > e + tol:
            raise ValidationError(f"camera footprint [{x0:g}, {x1:g}] x [{y0:g}, {y1:g}] leaves the heightmap extent")

    def floor_height_under(self, target: CylinderTarget) -> float:
        return float(self.heightmap.height(*target.center_xy_m))

    def to_dict(self) -> dict:
        grid = np.ascontiguousarray(self.heightmap.grid, dtype="<f8")
        return {
            "heightmap": {
                "extent_m": self.heightmap.extent_m,
                "size": self.heightmap.size,
                "grid_f64le_b64": base64.b64encode(grid.tobytes()).decode("ascii"),
            },
            "targets": [dataclasses.asdict(t) for t in self.targets],
            "lights": dataclasses.asdict(self.lights),
            "camera": dataclasses.asdict(self.camera),
            "background_noise_sigma": self.background_noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        hm = d["heightmap"]
        n = int(hm["size"])
        grid = np.frombuffer(base64.b64decode(hm["grid_f64le_b64"]), dtype="<f8").reshape(n, n)
        return cls(
            Heightmap(grid.astype(np.float64), hm["extent_m"]),
            tuple(CylinderTarget(**t) for t in d["targets"]),
            LightArraySpec(**d["lights"]),
            CameraSpec(**d["camera"]),
            d["background_noise_sigma"],
        )


# ------------------------------------------------------------------ configuration

@dataclass
class TargetsConfig:
    length_m: float = 2.0
    radius_m: float = 0.25
    roughness_amp: float = 0.05
    field_spacing_m: float | None = None
    burial_min: float = 0.0
    burial_max: float = 0.5
    seed: int = 0
    # explicit targets: (x_m, y_m, yaw_rad, burial_frac)
    items: list[tuple[float, float, float, float]] = field(default_factory=list)


@dataclass
class LightsConfig:
    count: int = 16
    max_range_m: float = 60.0
    altitude_m: float | None = None
    range_m: float | None = None
    track_length_m: float = 30.0
    track_start_m: tuple[float, float] | None = None
    track_end_m: tuple[float, float] | None = None
    cone_half_angle_rad: float = math.radians(88.0)
    intensity: float | None = None
    exposure: float = 0.35


@dataclass
class CameraConfig:
    center_x_m: float | None = None
    center_y_m: float | None = None
    footprint_m: float = 6.4
    pixels: int = 64


@dataclass
class NoiseConfig:
    sigma: float = 0.05


@dataclass
class SceneConfig:
    seafloor: SeafloorSpec = field(default_factory=SeafloorSpec)
    targets: TargetsConfig = field(default_factory=TargetsConfig)
    lights: LightsConfig = field(default_factory=LightsConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)


_SECTIONS = {
    "seafloor": SeafloorSpec,
    "targets": TargetsConfig,
    "lights": LightsConfig,
    "camera": CameraConfig,
    "noise": NoiseConfig,
}
_ITEM_KEY = re.compile(r"^target\.(\d+)$")


def _parse_value(raw: str, annotation: str):
    raw = raw.strip()
    if "None" in annotation and raw.lower() in ("", "none"):
        return None
    if annotation.startswith("tuple"):
        return tuple(float(v) for v in raw.split(","))
    if annotation.startswith("int"):
        return int(raw)
    return float(raw)


def parse_scene_config(text: str) -> SceneConfig:
    """Parse ``key = value`` lines grouped under ``[section]`` headers.

    Unknown sections or keys are errors. Explicit targets are given as
    ``target.N = x_m, y_m, yaw_rad, burial_frac`` under ``[targets]``.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"scene config: {exc}") from exc
    cfg = SceneConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"scene config: unknown section [{section}]")
        cls = _SECTIONS[section]
        fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "items"}
        values: dict = {}
        items = []
        for key, raw in parser.items(section):
            m = _ITEM_KEY.match(key)
            if section == "targets" and m:
                parts = [float(v) for v in raw.split(",")]
                if len(parts) != 4:
                    raise ConfigError(f"scene config: {key} needs x, y, yaw_rad, burial_frac")
                items.append((int(m.group(1)), tuple(parts)))
                continue
            if key not in fields:
                raise ConfigError(f"scene config: unknown key '{key}' in [{section}]")
            try:
                values[key] = _parse_value(raw, str(fields[key].type))
            except ValueError as exc:
                raise ConfigError(f"scene config: bad value for {section}.{key}: {raw!r}") from exc
        if items:
            values["items"] = [v for _, v in sorted(items)]
        setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
    return cfg


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return repr(v)


def format_scene_config(cfg: SceneConfig) -> str:
    """Inverse of :func:`parse_scene_config` (floats written with ``repr`` for exact round trips)."""
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            if f.name == "items":
                for k, item in enumerate(obj.items):
                    lines.append(f"target.{k} = {_fmt(tuple(item))}")
                continue
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_scene_config(path) -> SceneConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_scene_config(fh.read())


def flat_floor_response(lights: LightArraySpec, point_xy: Sequence[float]) -> float:
    """Unshadowed diffuse radiance of a flat floor at ``point_xy`` for unit source intensity."""
    p = np.array([point_xy[0], point_xy[1], 0.0])
    src = lights.positions()
    d = src - p
    dist = np.linalg.norm(d, axis=1)
    lam = np.clip(d[:, 2] / dist, 0.0, None)
    return float(np.sum(lam * cone_weight(d[:, 2] / dist, lights.cone_half_angle_rad)))


def build_scene(config: SceneConfig, heightmap: Heightmap | None = None) -> Scene:
    """Assemble and validate a :class:`Scene` from configuration.

    The light altitude defaults to one tenth of ``max_range_m``; the track
    runs along y at ``range_m`` (default half the maximum range) short of the
    camera centre. Without an explicit intensity the sources are scaled so a
    flat unshadowed floor at the camera centre has radiance ``exposure``.
    """
    sf = config.seafloor
    hm = heightmap if heightmap is not None else synthesize_heightmap(sf)
    cam_cfg = config.camera
    cx = cam_cfg.center_x_m if cam_cfg.center_x_m is not None else hm.extent_m / 2.0
    cy = cam_cfg.center_y_m if cam_cfg.center_y_m is not None else hm.extent_m / 2.0
    camera = CameraSpec((cx, cy), cam_cfg.footprint_m, int(cam_cfg.pixels))

    lc = config.lights
    if not lc.max_range_m > 0:
        raise ValidationError(f"lights.max_range_m must be > 0, got {lc.max_range_m}")
    altitude = lc.altitude_m if lc.altitude_m is not None else 0.1 * lc.max_range_m
    rng_m = lc.range_m if lc.range_m is not None else 0.5 * lc.max_range_m
    start = lc.track_start_m if lc.track_start_m is not None else (cx - rng_m, cy - lc.track_length_m / 2.0)
    end = lc.track_end_m if lc.track_end_m is not None else (cx - rng_m, cy + lc.track_length_m / 2.0)
    lights = LightArraySpec(int(lc.count), start, end, altitude, lc.cone_half_angle_rad, 1.0)
    lights.validate()
    if lc.intensity is not None:
        intensity = lc.intensity
    else:
        resp = flat_floor_response(lights, (cx, cy))
        intensity = lc.exposure / resp if resp > 0 else 1.0
    lights = dataclasses.replace(lights, intensity=float(intensity))

    tc = config.targets
    targets: list[CylinderTarget] = []
    if tc.field_spacing_m is not None:
        targets.extend(
            sample_target_field(
                hm.extent_m, tc.field_spacing_m, tc.seed, tc.length_m, tc.radius_m, tc.roughness_amp,
                (tc.burial_min, tc.burial_max),
            )
        )
    for x, y, yaw, burial in tc.items:
        targets.append(CylinderTarget((x, y), tc.length_m, tc.radius_m, yaw, burial, tc.roughness_amp))

    scene = Scene(hm, tuple(targets), lights, camera, float(config.noise.sigma))
    scene.validate()
    return scene


def chip_config(size: int = 64, seed: int = 0, target: tuple[float, float, float, float] | None = None) -> SceneConfig:
    """Training-chip preset: a 6.4 m footprint at 64 or 256 pixels, one optional target.

    ``target`` is ``(dx_m, dy_m, yaw_rad, burial_frac)`` relative to the camera centre.
    """
    if size not in (64, 256):
        raise ParameterError(f"chip size must be 64 or 256, got {size}")
    grid = 129 if size == 64 else 257
    cfg = SceneConfig(
        seafloor=SeafloorSpec(grid, 8.0, 0.02, 0.5, seed),
        camera=CameraConfig(4.0, 4.0, 6.4, size),
    )
    if target is not None:
        dx, dy, yaw, burial = target
        cfg.targets.items = [(4.0 + dx, 4.0 + dy, yaw, burial)]
    return cfg


def target_field_config(seed: int = 0, pixels: int = 512) -> SceneConfig:
    """The 60 m x 60 m field of cylinders on a 5 m grid (overview scene)."""
    return SceneConfig(
        seafloor=SeafloorSpec(513, 60.0, 0.05, 1.0, seed),
        targets=TargetsConfig(field_spacing_m=5.0, seed=seed),
        lights=LightsConfig(count=32, max_range_m=150.0, range_m=60.0, track_length_m=120.0),
        camera=CameraConfig(30.0, 30.0, 60.0, pixels),
    )
