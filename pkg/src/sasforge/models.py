"""The four networks: autoencoder (feature extractor), refiner, critic, DCGAN baseline.

All models keep their parameters in an ordered ``params`` dict of named
:class:`~sasforge.autodiff.Tensor` leaves; declaration order is the
checkpoint order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv2d, glorot_uniform, linear
from .errors import ShapeError


@dataclass(frozen=True)
class AutoencoderConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32, 32)
    feature_dim: int = 1024


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 16
    residual_blocks: int = 4
    instance_norm: bool = False
    final_scale: float = 0.1
    # input clip before the logit skip connection
    skip_clip: float = 0.01


@dataclass(frozen=True)
class CriticConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128)
    alpha: float = 0.2


@dataclass(frozen=True)
class BaselineConfig:
    image_size: int = 64
    latent_dim: int = 128
    channels: tuple[int, ...] = (64, 32, 16)
    start_size: int = 8


def preset(size: int = 64) -> dict[str, Any]:
    """Model configs for the 64x64 desk scale or the 256x256 full scale."""
    if size == 64:
        return {
            "autoencoder": AutoencoderConfig(64),
            "generator": GeneratorConfig(16, 4),
            "critic": CriticConfig(64),
            "baseline": BaselineConfig(64),
        }
    if size == 256:
        return {
            "autoencoder": AutoencoderConfig(256, (16, 32, 64, 64)),
            "generator": GeneratorConfig(32, 6),
            "critic": CriticConfig(256, (64, 128, 256, 512)),
            "baseline": BaselineConfig(256, 128, (256, 128, 64, 32, 16)),
        }
    raise ShapeError(f"no preset for image size {size}; use 64 or 256")


def config_to_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def config_from_dict(cls, d: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


class Model:
    """Named parameter collection plus a forward function."""

    kind = "model"

    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def _conv(self, rng, name, cin, cout, k, scale=1.0):
        self.params[f"{name}.w"] = Tensor(
            glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k, self.dtype, scale), requires_grad=True
        )
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def _linear(self, rng, name, fin, fout):
        self.params[f"{name}.w"] = Tensor(glorot_uniform(rng, (fout, fin), fin, fout, self.dtype), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(fout, dtype=self.dtype), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ShapeError(f"{self.kind}: parameter names differ: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{self.kind}: {k} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def w(self, name: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{name}.w"], self.params[f"{name}.b"]

    def as_input(self, images) -> Tensor:
        """Accept (H, W), (N, H, W) or (N, 1, H, W) arrays or tensors."""
        if isinstance(images, Tensor):
            x = images
        else:
            arr = np.asarray(images, dtype=self.dtype)
            if arr.ndim == 2:
                arr = arr[None, None]
            elif arr.ndim == 3:
                arr = arr[:, None]
            x = Tensor(arr)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"{self.kind}: expected single-channel images, got shape {x.shape}")
        return x


class Autoencoder(Model):
    """Conv encoder (conv3x3-ReLU-maxpool x4, linear to the feature vector) and mirrored decoder."""

    kind = "autoencoder"

    def __init__(self, config: AutoencoderConfig = AutoencoderConfig(), seed: int = 0, dtype=np.float32):
        super().__init__(config, dtype)
        if len(config.channels) != 4:
            raise ShapeError("autoencoder needs exactly four encoder channel widths")
        if config.image_size % 16:
            raise ShapeError(f"autoencoder image size {config.image_size} must be divisible by 16")
        rng = np.random.default_rng(seed)
        chans = (1,) + tuple(config.channels)
        for i in range(4):
            self._conv(rng, f"enc{i}", chans[i], chans[i + 1], 3)
        self.bottleneck = (chans[-1], config.image_size // 16, config.image_size // 16)
        flat = int(np.prod(self.bottleneck))
        self._linear(rng, "enc_fc", flat, config.feature_dim)
        self._linear(rng, "dec_fc", config.feature_dim, flat)
        dec = tuple(reversed(chans))
        for i in range(4):
            self._conv(rng, f"dec{i}", dec[i], dec[i + 1], 3)

    def encode(self, images) -> Tensor:
        x = self.as_input(images)
        if x.shape[2:] != (self.config.image_size,) * 2:
            raise ShapeError(f"autoencoder expects {self.config.image_size}x{self.config.image_size}, got {x.shape[2:]}")
        h = x
        for i in range(4):
            h = ad.maxpool2x2(ad.relu(conv2d(h, *self.w(f"enc{i}"), padding=1)))
        h = ad.reshape(h, (x.shape[0], -1))
        return linear(h, *self.w("enc_fc"))

    def decode(self, phi) -> Tensor:
        phi = phi if isinstance(phi, Tensor) else Tensor(np.asarray(phi, dtype=self.dtype))
        if phi.ndim != 2 or phi.shape[1] != self.config.feature_dim:
            raise ShapeError(f"autoencoder decode expects (N, {self.config.feature_dim}), got {phi.shape}")
        h = ad.relu(linear(phi, *self.w("dec_fc")))
        h = ad.reshape(h, (phi.shape[0],) + self.bottleneck)
        for i in range(4):
            h = ad.relu(conv2d(ad.upsample2x(h), *self.w(f"dec{i}"), padding=1))
        return h

    def __call__(self, images) -> Tensor:
        return self.decode(self.encode(images))


class Generator(Model):
    """Render refiner: stem, two stride-2 downsamplings, residual blocks, two
    upsample+conv stages, and a full-resolution tail with a skip from the stem.

    The output is ``sigmoid(logit(x) + r(x))`` so that at initialisation, with
    the residual ``r`` scaled down, the network is close to the identity.
    """

    kind = "generator"

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), seed: int = 0, dtype=np.float32):
        super().__init__(config, dtype)
        rng = np.random.default_rng(seed)
        c = config.base_channels
        self._conv(rng, "stem", 1, c, 3)
        self._conv(rng, "down1", c, 2 * c, 3)
        self._conv(rng, "down2", 2 * c, 4 * c, 3)
        for i in range(config.residual_blocks):
            self._conv(rng, f"res{i}.a", 4 * c, 4 * c, 3)
            self._conv(rng, f"res{i}.b", 4 * c, 4 * c, 3)
        self._conv(rng, "up1", 4 * c, 2 * c, 3)
        self._conv(rng, "up2", 2 * c, c, 3)
        self._conv(rng, "tail", 2 * c, c, 3)
        self._conv(rng, "out", c, 1, 3, scale=config.final_scale)

    def _act(self, h):
        if self.config.instance_norm:
            h = ad.instance_norm(h)
        return ad.relu(h)

    def __call__(self, images) -> Tensor:
        x = self.as_input(images)
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"generator input size {x.shape[2:]} must be divisible by 4")
        stem = ad.relu(conv2d(x, *self.w("stem"), padding=1))
        h = self._act(conv2d(stem, *self.w("down1"), stride=2, padding=1))
        h = self._act(conv2d(h, *self.w("down2"), stride=2, padding=1))
        for i in range(self.config.residual_blocks):
            r = self._act(conv2d(h, *self.w(f"res{i}.a"), padding=1))
            h = h + conv2d(r, *self.w(f"res{i}.b"), padding=1)
        h = self._act(conv2d(ad.upsample2x(h), *self.w("up1"), padding=1))
        h = self._act(conv2d(ad.upsample2x(h), *self.w("up2"), padding=1))
        h = ad.relu(conv2d(ad.concat([h, stem], axis=1), *self.w("tail"), padding=1))
        resid = conv2d(h, *self.w("out"), padding=1)
        eps = self.config.skip_clip
        xc = np.clip(x.data, eps, 1.0 - eps)
        skip = Tensor(np.log(xc / (1.0 - xc)).astype(self.dtype))
        return ad.sigmoid(resid + skip)


class Critic(Model):
    """DCGAN-style stride-2 conv stack with leaky ReLU and a linear scalar head."""

    kind = "critic"

    def __init__(self, config: CriticConfig = CriticConfig(), seed: int = 0, dtype=np.float32):
        super().__init__(config, dtype)
        rng = np.random.default_rng(seed)
        chans = (1,) + tuple(config.channels)
        for i in range(len(config.channels)):
            self._conv(rng, f"conv{i}", chans[i], chans[i + 1], 4)
        side = config.image_size >> len(config.channels)
        self._linear(rng, "head", chans[-1] * side * side, 1)

    def __call__(self, images) -> Tensor:
        """Scores of shape (N,); no output squashing."""
        x = self.as_input(images)
        if x.shape[2:] != (self.config.image_size,) * 2:
            raise ShapeError(f"critic expects {self.config.image_size}x{self.config.image_size}, got {x.shape[2:]}")
        h = x
        for i in range(len(self.config.channels)):
            h = ad.leaky_relu(conv2d(h, *self.w(f"conv{i}"), stride=2, padding=1), self.config.alpha)
        h = ad.reshape(h, (x.shape[0], -1))
        return ad.reshape(linear(h, *self.w("head")), (x.shape[0],))


class BaselineGenerator(Model):
    """Latent-to-image DCGAN generator used as the unconditional baseline."""

    kind = "baseline"

    def __init__(self, config: BaselineConfig = BaselineConfig(), seed: int = 0, dtype=np.float32):
        super().__init__(config, dtype)
        ups = int(round(np.log2(config.image_size / config.start_size)))
        if config.start_size << ups != config.image_size or len(config.channels) != ups:
            raise ShapeError(
                f"baseline: {len(config.channels)} channel widths cannot grow {config.start_size} to {config.image_size}"
            )
        rng = np.random.default_rng(seed)
        c0 = config.channels[0]
        self._linear(rng, "fc", config.latent_dim, c0 * config.start_size ** 2)
        chans = tuple(config.channels) + (config.channels[-1],)
        for i in range(ups):
            self._conv(rng, f"up{i}", chans[i], chans[i + 1], 3)
        self._conv(rng, "out", chans[-1], 1, 3)

    def sample_latent(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.config.latent_dim)).astype(self.dtype)

    def __call__(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"baseline expects latents of shape (N, {self.config.latent_dim}), got {z.shape}")
        s = self.config.start_size
        h = ad.relu(linear(z, *self.w("fc")))
        h = ad.reshape(h, (z.shape[0], self.config.channels[0], s, s))
        for i in range(len(self.config.channels)):
            h = ad.relu(conv2d(ad.upsample2x(h), *self.w(f"up{i}"), padding=1))
        return ad.sigmoid(conv2d(h, *self.w("out"), padding=1))


MODEL_CLASSES = {cls.kind: cls for cls in (Autoencoder, Generator, Critic, BaselineGenerator)}
CONFIG_CLASSES = {
    "autoencoder": AutoencoderConfig,
    "generator": GeneratorConfig,
    "critic": CriticConfig,
    "baseline": BaselineConfig,
}


def _batched(fn, arr: np.ndarray, batch_size: int = 32) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for i in range(0, len(arr), batch_size):
            outs.append(fn(arr[i:i + batch_size]).data)
    return np.concatenate(outs)


def ae_encode(ae: Autoencoder, images) -> np.ndarray:
    """Feature vectors for an image (H, W) -> (d,) or a stack (N, H, W) -> (N, d)."""
    arr = np.asarray(images)
    out = _batched(ae.encode, arr[None] if arr.ndim == 2 else arr)
    return out[0] if arr.ndim == 2 else out


def ae_decode(ae: Autoencoder, phi) -> np.ndarray:
    phi = np.asarray(phi)
    out = _batched(ae.decode, phi[None] if phi.ndim == 1 else phi)[:, 0]
    return out[0] if phi.ndim == 1 else out


def generator_forward(gen: Generator, images) -> np.ndarray:
    """Refined images with the same shape as the input renders."""
    arr = np.asarray(images)
    out = _batched(gen, arr[None] if arr.ndim == 2 else arr)[:, 0]
    return out[0] if arr.ndim == 2 else out


def critic_forward(critic: Critic, images) -> np.ndarray:
    arr = np.asarray(images)
    return _batched(critic, arr[None] if arr.ndim == 2 else arr)


def baseline_generate(base: BaselineGenerator, z) -> np.ndarray:
    z = np.asarray(z)
    single = z.ndim == 1
    with ad.no_grad():
        out = base(z[None] if single else z).data[:, 0]
    return out[0] if single else out
