"""Overhead orthographic ray caster standing in for an optical sonar renderer.

Direct illumination only: ambient plus, for every source in the light array,
cone-gated Lambertian and specular terms times hard-shadow visibility. All
intersection routines are vectorised over batches of rays.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError
from .scene import CylinderTarget, Heightmap, Scene, cone_weight

EPS_T = 1e-6
SHADOW_OFFSET = 1e-4


@dataclass(frozen=True)
class RenderConfig:
    samples_per_pixel: int = 1
    ambient: float = 0.04
    specular_exponent: float = 40.0
    specular_weight: float = 0.25
    seed: int = 0
    tone_gamma: float = 0.8

    def validate(self) -> None:
        if int(self.samples_per_pixel) != self.samples_per_pixel or self.samples_per_pixel < 1:
            raise ParameterError(f"samples_per_pixel must be an integer >= 1, got {self.samples_per_pixel}")
        if not 0 <= self.ambient < 1:
            raise ParameterError(f"ambient must be in [0, 1), got {self.ambient}")
        if not self.specular_exponent > 0:
            raise ParameterError(f"specular_exponent must be > 0, got {self.specular_exponent}")
        if not self.tone_gamma > 0:
            raise ParameterError(f"tone_gamma must be > 0, got {self.tone_gamma}")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ParameterError(f"ray direction must be unit length, got |d| = {np.linalg.norm(d)}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class Hit:
    distance: float
    normal: np.ndarray


@dataclass
class Image:
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# ------------------------------------------------------------------ keyed RNG

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def keyed_uniform(seed: int, rows, cols, sample: int, stream: int) -> np.ndarray:
    """Counter-based uniforms in (0, 1) keyed by (seed, row, col, sample, stream)."""
    with np.errstate(over="ignore"):
        key = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLD)
        key = _mix64(key ^ (np.uint64(stream) * _GOLD + np.uint64(sample)))
        z = _mix64(key ^ (np.asarray(rows, dtype=np.uint64) << np.uint64(32)) ^ np.asarray(cols, dtype=np.uint64))
        z = _mix64(z + _GOLD)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


def keyed_normal(seed: int, rows, cols, sample: int = 0) -> np.ndarray:
    u1 = keyed_uniform(seed, rows, cols, sample, 1)
    u2 = keyed_uniform(seed, rows, cols, sample, 2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


# ------------------------------------------------------------------ cylinder

def _cylinder_frame(target: CylinderTarget, floor_z: float):
    c, s = math.cos(target.yaw_rad), math.sin(target.yaw_rad)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    r = target.radius_m
    center = np.array([target.center_xy_m[0], target.center_xy_m[1], floor_z + r - target.burial_frac * 2.0 * r])
    return rot, center


def cylinder_axis_height(target: CylinderTarget, floor_z: float) -> float:
    return floor_z + target.radius_m * (1.0 - 2.0 * target.burial_frac)


def intersect_cylinder_batch(origins, dirs, target: CylinderTarget, floor_z: float, t_max=np.inf):
    """Nearest hits of rays with a finite capped cylinder lying on the seafloor.

    Candidate hits at or below ``floor_z`` (the buried part) are discarded. Returns
    ``(t, normals)`` with ``t = inf`` for misses; normals are geometric.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(origins)
    rot, center = _cylinder_frame(target, floor_z)
    o = (origins - center) @ rot.T
    d = dirs @ rot.T
    r, half = target.radius_m, target.length_m / 2.0
    cand_t = np.full((n, 4), np.inf)
    cand_n = np.zeros((n, 4, 3))

    a = d[:, 1] ** 2 + d[:, 2] ** 2
    b = 2.0 * (o[:, 1] * d[:, 1] + o[:, 2] * d[:, 2])
    c = o[:, 1] ** 2 + o[:, 2] ** 2 - r * r
    disc = b * b - 4.0 * a * c
    ok = (a > 1e-300) & (disc >= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for k, sign in enumerate((-1.0, 1.0)):
            t = (-b + sign * sq) / (2.0 * a)
            ax = o[:, 0] + t * d[:, 0]
            good = ok & (np.abs(ax) <= half)
            cand_t[good, k] = t[good]
            cand_n[good, k, 1] = (o[good, 1] + t[good] * d[good, 1]) / r
            cand_n[good, k, 2] = (o[good, 2] + t[good] * d[good, 2]) / r
        nz = d[:, 0] != 0
        for k, cap in ((2, -half), (3, half)):
            t = np.where(nz, (cap - o[:, 0]) / np.where(nz, d[:, 0], 1.0), np.inf)
            rad2 = (o[:, 1] + t * d[:, 1]) ** 2 + (o[:, 2] + t * d[:, 2]) ** 2
            good = nz & (rad2 <= r * r)
            cand_t[good, k] = t[good]
            cand_n[good, k, 0] = np.sign(cap)
    finite = np.isfinite(cand_t)
    world_z = origins[:, 2:3] + np.where(finite, cand_t, 0.0) * dirs[:, 2:3]
    t_max = np.asarray(t_max, dtype=np.float64)
    if t_max.ndim:
        t_max = t_max[:, None]
    valid = (cand_t > EPS_T) & (cand_t < t_max) & finite & (world_z > floor_z)
    cand_t = np.where(valid, cand_t, np.inf)
    best = np.argmin(cand_t, axis=1)
    t_hit = cand_t[np.arange(n), best]
    normals = cand_n[np.arange(n), best] @ rot
    return t_hit, normals


def rough_cylinder_normals(points, normals, target: CylinderTarget, floor_z: float) -> np.ndarray:
    """Perturb side-surface normals with a fixed sinusoidal pattern scaled by ``roughness_amp``."""
    if target.roughness_amp == 0 or len(points) == 0:
        return normals
    rot, center = _cylinder_frame(target, floor_z)
    local = (points - center) @ rot.T
    s = local[:, 0] / target.radius_m
    theta = np.arctan2(local[:, 2], local[:, 1])
    axial = rot[0]
    circ = np.stack([np.zeros_like(theta), -np.sin(theta), np.cos(theta)], axis=1) @ rot
    amp = target.roughness_amp
    p1 = amp * np.sin(5.3 * s + 7.0 * theta + 0.7 * target.length_m)
    p2 = amp * np.sin(9.1 * theta - 4.7 * s)
    side = np.abs(local[:, 0]) < target.length_m / 2.0 - 1e-9
    out = normals + side[:, None] * (p1[:, None] * axial + p2[:, None] * circ)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def intersect_cylinder(ray: Ray, target: CylinderTarget, local_floor_z: float) -> Hit | None:
    t, nrm = intersect_cylinder_batch(ray.origin[None], ray.direction[None], target, local_floor_z)
    if not np.isfinite(t[0]):
        return None
    return Hit(float(t[0]), nrm[0])


# ------------------------------------------------------------------ heightmap

def _slab(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tn = np.minimum(t0, t1)
    tf = np.maximum(t0, t1)
    par = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    tn = np.where(par, np.where(inside, -np.inf, np.inf), tn)
    tf = np.where(par, np.where(inside, np.inf, -np.inf), tf)
    return tn.max(axis=1), tf.min(axis=1)


def intersect_heightmap_batch(origins, dirs, hm: Heightmap, t_max=np.inf, refine: int = 40):
    """Nearest hits of rays with the bilinear heightmap surface.

    Rays are clipped to the heightmap's bounding box and marched until the
    height difference changes sign. Each step is the larger of half a cell of
    horizontal travel and the distance the surface slope bound proves free.
    The bracket is then refined by bisection. Returns ``(t, normals)``.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(origins)
    pad = 1e-9 + 1e-9 * max(abs(hm.hmin), abs(hm.hmax))
    lo = np.array([0.0, 0.0, hm.hmin - pad])
    hi = np.array([hm.extent_m, hm.extent_m, hm.hmax + pad])
    t_in, t_out = _slab(origins, dirs, lo, hi)
    t_in = np.maximum(t_in, 0.0)
    t_out = np.minimum(t_out, t_max)
    t_hit = np.full(n, np.inf)
    normals = np.zeros((n, 3))
    idx = np.nonzero(t_in <= t_out)[0]
    if len(idx) == 0:
        return t_hit, normals

    def f(rows, t):
        p = origins[rows] + t[:, None] * dirs[rows]
        return p[:, 2] - hm.height(p[:, 0], p[:, 1])

    speed = np.hypot(dirs[idx, 0], dirs[idx, 1])
    step = np.where(speed > 0, 0.5 * hm.cell_m / np.maximum(speed, 1e-300), np.inf)
    ta = t_in[idx]
    tend = t_out[idx]
    step = np.minimum(step, np.maximum(tend - ta, 0.0))
    fa = f(idx, ta)
    start_below = fa <= 0
    t_hit[idx[start_below]] = ta[start_below]
    keep = ~start_below
    rows, ta, fa, tend, step = idx[keep], ta[keep], fa[keep], tend[keep], step[keep]
    # f can fall no faster than (slope_bound * horizontal speed - vertical speed) per unit t
    fall = hm.slope_bound * np.hypot(dirs[rows, 0], dirs[rows, 1]) - dirs[rows, 2]
    brackets = []
    while len(rows):
        with np.errstate(divide="ignore"):
            safe = np.where(fall > 0, fa / np.where(fall > 0, fall, 1.0), np.inf)
        tb = np.minimum(ta + np.maximum(step, safe), tend)
        fb = f(rows, tb)
        cross = fb <= 0
        if cross.any():
            brackets.append((rows[cross], ta[cross], tb[cross]))
        live = ~cross & (tb < tend)
        rows, ta, fa, tend, step, fall = rows[live], tb[live], fb[live], tend[live], step[live], fall[live]
    if brackets:
        rows = np.concatenate([b[0] for b in brackets])
        a = np.concatenate([b[1] for b in brackets])
        b = np.concatenate([b[2] for b in brackets])
        for _ in range(refine):
            m = 0.5 * (a + b)
            below = f(rows, m) <= 0
            b = np.where(below, m, b)
            a = np.where(below, a, m)
        t_hit[rows] = b
    hit = np.isfinite(t_hit)
    p = origins[hit] + t_hit[hit, None] * dirs[hit]
    normals[hit] = hm.normal(p[:, 0], p[:, 1])
    return t_hit, normals


def intersect_heightmap(ray: Ray, hm: Heightmap) -> Hit | None:
    t, nrm = intersect_heightmap_batch(ray.origin[None], ray.direction[None], hm)
    if not np.isfinite(t[0]):
        return None
    return Hit(float(t[0]), nrm[0])


# ------------------------------------------------------------------ scene tracing and shading

def _scene_top(scene: Scene) -> float:
    top = scene.heightmap.hmax
    for tgt in scene.targets:
        top = max(top, scene.floor_height_under(tgt) + 2.0 * tgt.radius_m)
    return top + 1.0


def _near_target(points, dirs, tgt: CylinderTarget, floor_z: float, t_max) -> np.ndarray:
    """Rays whose segment [0, t_max] passes within the target's bounding sphere."""
    _, center = _cylinder_frame(tgt, floor_z)
    rad = math.hypot(tgt.length_m / 2.0, tgt.radius_m) + 1e-6
    rel = center - points
    t = np.clip(np.einsum("ij,ij->i", rel, dirs), 0.0, t_max)
    closest = rel - t[:, None] * dirs
    return np.einsum("ij,ij->i", closest, closest) <= rad * rad


def _occluded(scene: Scene, floors, points, dirs, t_max) -> np.ndarray:
    blocked = np.zeros(len(points), dtype=bool)
    for tgt, fz in zip(scene.targets, floors):
        near = np.nonzero(_near_target(points, dirs, tgt, fz, t_max))[0]
        if len(near):
            t, _ = intersect_cylinder_batch(points[near], dirs[near], tgt, fz, t_max[near])
            blocked[near[np.isfinite(t)]] = True
    rest = ~blocked
    if rest.any():
        t, _ = intersect_heightmap_batch(points[rest], dirs[rest], scene.heightmap, t_max[rest])
        blocked[np.nonzero(rest)[0][np.isfinite(t)]] = True
    return blocked


def _radiance(scene: Scene, cfg: RenderConfig, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Pre-noise radiance for vertical rays through world points (xs, ys)."""
    n = len(xs)
    top = _scene_top(scene)
    origins = np.column_stack([xs, ys, np.full(n, top)])
    dirs = np.tile([0.0, 0.0, -1.0], (n, 1))
    t_best, normals = intersect_heightmap_batch(origins, dirs, scene.heightmap)
    owner = np.where(np.isfinite(t_best), 0, -1)
    floors = [scene.floor_height_under(tgt) for tgt in scene.targets]
    for k, (tgt, fz) in enumerate(zip(scene.targets, floors)):
        near = np.nonzero(_near_target(origins, dirs, tgt, fz, np.full(n, np.inf)))[0]
        if not len(near):
            continue
        t, nrm = intersect_cylinder_batch(origins[near], dirs[near], tgt, fz)
        closer = t < t_best[near]
        idx = near[closer]
        t_best[idx] = t[closer]
        normals[idx] = nrm[closer]
        owner[idx] = k + 1
    points = origins + np.where(np.isfinite(t_best), t_best, 0.0)[:, None] * dirs
    for k, (tgt, fz) in enumerate(zip(scene.targets, floors)):
        sel = owner == k + 1
        if sel.any():
            normals[sel] = rough_cylinder_normals(points[sel], normals[sel], tgt, fz)

    hit = owner >= 0
    rad = np.full(n, cfg.ambient)
    rad[~hit] = 0.0
    if not hit.any():
        return rad
    p = points[hit]
    nrm = normals[hit]
    start = p + SHADOW_OFFSET * nrm
    lights = scene.lights
    half = lights.cone_half_angle_rad
    view = np.array([0.0, 0.0, 1.0])
    acc = np.zeros(len(p))
    for src in lights.positions():
        vec = src - start
        dist = np.linalg.norm(vec, axis=1)
        l = vec / dist[:, None]
        cone = cone_weight(l[:, 2], half)
        ndl = np.einsum("ij,ij->i", nrm, l)
        lit = (cone > 0) & (ndl > 0)
        if not lit.any():
            continue
        hvec = l + view
        hvec /= np.linalg.norm(hvec, axis=1, keepdims=True)
        ndh = np.clip(np.einsum("ij,ij->i", nrm, hvec), 0.0, None)
        term = cone * (ndl + cfg.specular_weight * ndh ** cfg.specular_exponent)
        rows = np.nonzero(lit)[0]
        vis = ~_occluded(scene, floors, start[rows], l[rows], dist[rows])
        acc[rows] += term[rows] * vis
    rad[hit] += lights.intensity * acc
    return rad


def _threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("SASFORGE_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def _pixel_grid(scene: Scene, cfg: RenderConfig, rows: np.ndarray, sample: int):
    cam = scene.camera
    cols = np.arange(cam.pixels)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    if cfg.samples_per_pixel == 1:
        jr = jc = np.zeros(rr.shape)
    else:
        jr = keyed_uniform(cfg.seed, rr, cc, sample, 3) - 0.5
        jc = keyed_uniform(cfg.seed, rr, cc, sample, 4) - 0.5
    xs, ys = cam.to_world(rr + jr, cc + jc)
    return rr, cc, xs.ravel(), ys.ravel()


def shade(scene: Scene, cfg: RenderConfig = RenderConfig(), threads: int | None = None) -> np.ndarray:
    """Pre-noise, pre-tone-mapping radiance image averaged over samples per pixel."""
    cfg.validate()
    if scene.lights.count < 1:
        raise ConfigError("render needs at least one light source")
    scene.validate()
    h = scene.camera.pixels
    nthreads = _threads(threads)
    bands = np.array_split(np.arange(h), min(nthreads * 4, h) if nthreads > 1 else 1)

    def band(rows):
        acc = np.zeros(len(rows) * h)
        for s in range(cfg.samples_per_pixel):
            _, _, xs, ys = _pixel_grid(scene, cfg, rows, s)
            acc += _radiance(scene, cfg, xs, ys)
        return (acc / cfg.samples_per_pixel).reshape(len(rows), h)

    if nthreads == 1:
        parts = [band(b) for b in bands]
    else:
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(band, bands))
    return np.vstack(parts)


def tone_map(values: np.ndarray, gamma: float) -> np.ndarray:
    return np.clip(values, 0.0, 1.0) ** gamma


def render(scene: Scene, cfg: RenderConfig = RenderConfig(), threads: int | None = None) -> Image:
    """Render the scene from the overhead orthographic camera.

    Gaussian pixel noise of std ``scene.background_noise_sigma`` is added
    before tone mapping; noise and sample jitter come from a counter-based
    generator keyed by (seed, row, col), so the image does not depend on the
    thread count.
    """
    rad = shade(scene, cfg, threads)
    if scene.background_noise_sigma > 0:
        h, w = rad.shape
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        rad = rad + scene.background_noise_sigma * keyed_normal(cfg.seed, rr, cc)
    return Image(tone_map(rad, cfg.tone_gamma))
