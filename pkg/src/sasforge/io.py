"""File formats: PGM images, SFW1 checkpoints, dataset manifests, and the degrade pipeline."""

from __future__ import annotations

import csv
import json
import re
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, ParameterError, ShapeError
from .models import CONFIG_CLASSES, MODEL_CLASSES, Model, config_from_dict, config_to_dict

# ------------------------------------------------------------------ PGM


def write_pgm(path, pixels: np.ndarray, bits: int = 8) -> None:
    """Write intensities in [0, 1] as binary PGM (P5), value = round(v * maxval)."""
    if bits not in (8, 16):
        raise ParameterError(f"PGM depth must be 8 or 16 bits, got {bits}")
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"write_pgm: expected a 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"write_pgm: non-finite pixels for {path}")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxval)
    data = q.astype(np.uint8) if bits == 8 else q.astype(">u2")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into float64 intensities in [0, 1]."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    pos += 1  # single whitespace byte after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    if len(raw) - pos < count * np.dtype(dtype).itemsize:
        raise DataError(f"{path}: PGM payload shorter than {w}x{h}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def list_pgms(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".pgm")


def load_image_dir(directory) -> tuple[list[str], np.ndarray]:
    """All PGMs in a directory (sorted by name) as an (N, H, W) stack."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"image directory not found: {directory}")
    paths = list_pgms(directory)
    if not paths:
        raise DataError(f"no PGM images in {directory}")
    images = [read_pgm(p) for p in paths]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{directory}: images have mixed sizes {sorted(shapes)}")
    return [p.name for p in paths], np.stack(images)


# ------------------------------------------------------------------ checkpoints

MAGIC = b"SFW1"
VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as float32 little-endian payloads after a shape table.

    ``meta`` (model kind and config) goes to a JSON sidecar ``<path>.json``.
    """
    path = Path(path)
    names = list(params)
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(names))
    for name in names:
        arr = np.asarray(params[name])
        enc = name.encode("utf-8")
        out += struct.pack("<I", len(enc)) + enc
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for name in names:
        out += np.ascontiguousarray(params[name], dtype="<f4").tobytes()
    path.write_bytes(bytes(out))
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`; returns (params, meta) with meta {} when there is no sidecar."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        pos = 12
        table = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            table.append((name, dims))
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    for name, dims in table:
        n = int(np.prod(dims, dtype=np.int64))
        if pos + 4 * n > len(raw):
            raise DataError(f"{path}: payload for {name} is truncated")
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes after payloads")
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.is_file() else {}
    return params, meta


def save_model(path, model: Model, extra: dict | None = None) -> None:
    meta = {"kind": model.kind, "config": config_to_dict(model.config)}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path, kind: str | None = None) -> Model:
    """Rebuild a model from a checkpoint and its sidecar."""
    params, meta = load_checkpoint(path)
    found = meta.get("kind")
    if found not in MODEL_CLASSES:
        raise DataError(f"{path}: sidecar does not name a known model kind (got {found!r})")
    if kind is not None and found != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, found {found}")
    cls = MODEL_CLASSES[found]
    model = cls(config_from_dict(CONFIG_CLASSES[found], meta.get("config", {})))
    model.load_state_dict(params)
    return model


# ------------------------------------------------------------------ manifests

MANIFEST_FIELDS = ("file", "scene_seed", "target_x_px", "target_y_px", "yaw_rad", "burial_frac", "role")


@dataclass(frozen=True)
class ManifestRecord:
    file: str
    scene_seed: int
    target_x_px: float
    target_y_px: float
    yaw_rad: float
    burial_frac: float
    role: str


def write_manifest(path, records: list[ManifestRecord]) -> None:
    names = [r.file for r in records]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate file names in manifest")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            row = asdict(r)
            w.writerow([repr(v) if isinstance(v, float) else v for v in (row[k] for k in MANIFEST_FIELDS)])


def read_manifest(path, check_files: bool = True) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    types = {f.name: f.type for f in fields(ManifestRecord)}
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: manifest columns {reader.fieldnames} != {list(MANIFEST_FIELDS)}")
        for row in reader:
            conv = {k: int(v) if types[k] == "int" else float(v) if types[k] == "float" else v for k, v in row.items()}
            records.append(ManifestRecord(**conv))
    names = [r.file for r in records]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate file names in manifest")
    if check_files:
        missing = [n for n in names if not (path.parent / n).is_file()]
        if missing:
            raise DataError(f"{path}: referenced images missing: {missing[:5]}")
    return records


# ------------------------------------------------------------------ pseudo-real degradation


@dataclass(frozen=True)
class DegradeConfig:
    """Speckle plus anisotropic blur; along-track is image rows, across-track is columns."""

    speckle_looks: int = 2
    blur_sigma_along: float = 1.0
    blur_sigma_across: float = 0.5
    contrast_gamma: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if int(self.speckle_looks) != self.speckle_looks or self.speckle_looks < 1:
            raise ParameterError(f"speckle_looks must be an integer >= 1, got {self.speckle_looks}")
        if self.blur_sigma_along < 0 or self.blur_sigma_across < 0:
            raise ParameterError("blur sigmas must be >= 0")
        if not self.contrast_gamma > 0:
            raise ParameterError(f"contrast_gamma must be > 0, got {self.contrast_gamma}")


def speckle_field(shape, looks: int, rng: np.random.Generator) -> np.ndarray:
    """Mean of ``looks`` unit-mean exponential draws per pixel (a Gamma(L, 1/L) variate)."""
    return rng.gamma(float(looks), 1.0 / looks, size=shape)


def degrade(image: np.ndarray, cfg: DegradeConfig, rng: np.random.Generator) -> np.ndarray:
    """v <- clamp(gamma(blur(v) * s)) with multiplicative speckle s."""
    v = np.asarray(image, dtype=np.float64)
    if cfg.blur_sigma_along > 0 or cfg.blur_sigma_across > 0:
        v = gaussian_filter(v, sigma=(cfg.blur_sigma_along, cfg.blur_sigma_across), mode="reflect")
    v = v * speckle_field(v.shape, cfg.speckle_looks, rng)
    return np.clip(np.clip(v, 0.0, None) ** cfg.contrast_gamma, 0.0, 1.0)


def degrade_stack(images: np.ndarray, cfg: DegradeConfig) -> np.ndarray:
    """Degrade an (N, H, W) stack; image k draws from a stream keyed by (seed, k)."""
    cfg.validate()
    return np.stack(
        [degrade(im, cfg, np.random.default_rng([cfg.seed, k])) for k, im in enumerate(images)]
    ) if len(images) else np.zeros((0,) + tuple(np.shape(images)[1:]))


# ------------------------------------------------------------------ run-config echo


def echo_run_config(out_dir, command: str, values: dict) -> Path:
    """Write the effective settings of a command next to its outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"run-config.{command}.json"
    path.write_text(json.dumps({"command": command, **values}, indent=2, sort_keys=True, default=str) + "\n")
    return path


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to {path}: {exc.strerror or exc}") from exc
    return path


__all__ = [
    "DegradeConfig",
    "ManifestRecord",
    "degrade",
    "degrade_stack",
    "echo_run_config",
    "ensure_dir",
    "list_pgms",
    "load_checkpoint",
    "load_image_dir",
    "load_model",
    "read_manifest",
    "read_pgm",
    "save_checkpoint",
    "save_model",
    "speckle_field",
    "write_manifest",
    "write_pgm",
    "MANIFEST_FIELDS",
]
