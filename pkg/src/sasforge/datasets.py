"""Seeded chip datasets: random target poses, rendering, manifest records and re-rendering."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import DataError, ParameterError
from .io import ManifestRecord
from .render import RenderConfig, render
from .scene import Scene, build_scene, chip_config

MAX_OFFSET_M = 1.2
BURIAL_RANGE = (0.0, 0.5)


def sample_pose(rng: np.random.Generator, max_offset_m: float = MAX_OFFSET_M, burial_range=BURIAL_RANGE):
    """Random (dx_m, dy_m, yaw_rad, burial_frac); yaw covers [0, pi) since a cylinder is symmetric."""
    dx, dy = rng.uniform(-max_offset_m, max_offset_m, size=2)
    yaw = rng.uniform(0.0, math.pi)
    burial = rng.uniform(*burial_range)
    return float(dx), float(dy), float(yaw), float(burial)


def chip_scene(seed: int, size: int = 64, pose=None, noise_sigma: float | None = None) -> Scene:
    cfg = chip_config(size, seed, pose)
    if noise_sigma is not None:
        cfg.noise = dataclasses.replace(cfg.noise, sigma=noise_sigma)
    return build_scene(cfg)


def render_chip(seed: int, size: int = 64, pose=None, noise_sigma: float | None = None,
                render_cfg: RenderConfig | None = None, threads: int | None = None) -> np.ndarray:
    scene = chip_scene(seed, size, pose, noise_sigma)
    cfg = dataclasses.replace(render_cfg or RenderConfig(), seed=seed)
    return render(scene, cfg, threads).pixels


def record_for(name: str, seed: int, size: int, pose, role: str) -> ManifestRecord:
    scene_cam = chip_config(size, seed).camera
    pix = scene_cam.footprint_m / size
    dx, dy, yaw, burial = pose
    # camera centre sits between the two middle pixels
    col = (size / 2.0 - 0.5) + dx / pix
    row = (size / 2.0 - 0.5) + dy / pix
    return ManifestRecord(name, int(seed), float(col), float(row), float(yaw), float(burial), role)


def pose_from_record(rec: ManifestRecord, size: int):
    pix = chip_config(size, rec.scene_seed).camera.footprint_m / size
    dx = (rec.target_x_px - (size / 2.0 - 0.5)) * pix
    dy = (rec.target_y_px - (size / 2.0 - 0.5)) * pix
    return dx, dy, rec.yaw_rad, rec.burial_frac


def plan_dataset(count: int, seed: int, size: int = 64, role: str = "render") -> list[tuple[ManifestRecord, tuple]]:
    """Scene seeds and poses for ``count`` chips, all drawn from one master seed."""
    if count < 0:
        raise ParameterError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    plan = []
    for k in range(count):
        scene_seed = int(rng.integers(0, 2**62))
        rec = record_for(f"{role}_{k:05d}.pgm", scene_seed, size, sample_pose(rng), role)
        # render from the pose as stored so manifest reproduction is bit-exact
        plan.append((rec, pose_from_record(rec, size)))
    return plan


def render_dataset(count: int, seed: int, size: int = 64, role: str = "render",
                   threads: int | None = None) -> tuple[np.ndarray, list[ManifestRecord]]:
    plan = plan_dataset(count, seed, size, role)
    images = [render_chip(rec.scene_seed, size, pose, threads=threads) for rec, pose in plan]
    stack = np.stack(images) if images else np.zeros((0, size, size))
    return stack, [rec for rec, _ in plan]


def rerender_record(rec: ManifestRecord, size: int, threads: int | None = None) -> np.ndarray:
    """Reproduce a manifest entry's image from its recorded seed and pose."""
    if size not in (64, 256):
        raise DataError(f"cannot re-render record {rec.file}: unsupported size {size}")
    return render_chip(rec.scene_seed, size, pose_from_record(rec, size), threads=threads)
