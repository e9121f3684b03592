"""Training loops: autoencoder reconstruction, render-conditioned WGAN, DCGAN baseline.

Critic objective (minimised by the critic):

    mean D(fake) - mean D(real) + lambda_gp * mean (||grad_x D(x_hat)||_2 - 1)^2

Generator objective:

    -mean D(G(p)) + mu_phi * mean ||phi(p) - phi(G(p))||^2

The feature-distance bound gamma is not enforced; the soft penalty replaces
it and the fraction of samples within gamma is logged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import ConfigError, DataError, NumericalAbort, ParameterError, ShapeError
from .models import (
    Autoencoder,
    AutoencoderConfig,
    BaselineConfig,
    BaselineGenerator,
    Critic,
    CriticConfig,
    Generator,
    GeneratorConfig,
)

GP_MODES = ("generated", "interpolate")
LIPSCHITZ_MODES = ("gradient-penalty", "weight-clipping")
METRIC_FIELDS = ("iter", "critic_loss", "gen_loss", "gp_term", "phi_term", "mean_grad_norm")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    lambda_gp: float = 10.0
    n_critic: int = 5
    mu_phi: float = 0.1
    gamma: float = 1.0
    iterations: int = 1000
    seed: int = 0
    gp_mode: str = "generated"
    lipschitz_mode: str = "gradient-penalty"
    clip_value: float = 0.01
    betas: tuple[float, float] = (0.5, 0.9)
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def validate(self) -> None:
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ParameterError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if self.lambda_gp < 0 or self.mu_phi < 0:
            raise ParameterError("lambda_gp and mu_phi must be >= 0")
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if int(self.n_critic) != self.n_critic or self.n_critic < 1:
            raise ParameterError(f"n_critic must be an integer >= 1, got {self.n_critic}")
        if self.iterations < 0:
            raise ParameterError(f"iterations must be >= 0, got {self.iterations}")
        if self.gp_mode not in GP_MODES:
            raise ParameterError(f"gp_mode must be one of {GP_MODES}, got {self.gp_mode!r}")
        if self.lipschitz_mode not in LIPSCHITZ_MODES:
            raise ParameterError(f"lipschitz_mode must be one of {LIPSCHITZ_MODES}, got {self.lipschitz_mode!r}")
        if not self.clip_value > 0:
            raise ParameterError(f"clip_value must be > 0, got {self.clip_value}")
        if self.checkpoint_every < 0:
            raise ParameterError("checkpoint_every must be >= 0")


def _check_images(images, what: str) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 3 or len(arr) == 0:
        raise DataError(f"{what}: need a nonempty (N, H, W) image stack, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what}: non-finite pixel values")
    return arr


def _batch(arr: np.ndarray, idx: np.ndarray, dtype) -> Tensor:
    return Tensor(arr[idx][:, None].astype(dtype))


# ------------------------------------------------------------------ autoencoder


@dataclass
class AutoencoderResult:
    model: Autoencoder
    history: list[float] = field(default_factory=list)


def train_autoencoder(images, cfg: TrainConfig, ae_config: AutoencoderConfig | None = None,
                      betas=(0.9, 0.999)) -> AutoencoderResult:
    """Minimise mean squared reconstruction error with Adam on random minibatches."""
    cfg.validate()
    arr = _check_images(images, "train_autoencoder")
    ae_config = ae_config or AutoencoderConfig(image_size=arr.shape[1])
    if arr.shape[1:] != (ae_config.image_size, ae_config.image_size):
        raise ShapeError(f"train_autoencoder: images {arr.shape[1:]} vs configured size {ae_config.image_size}")
    ae = Autoencoder(ae_config, seed=cfg.seed)
    opt = Adam(ae.parameters(), cfg.lr, betas)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.iterations):
        idx = rng.integers(0, len(arr), size=cfg.batch_size)
        x = _batch(arr, idx, ae.dtype)
        loss = ad.mean(ad.square(ae(x) - x))
        value = float(loss.item())
        if not math.isfinite(value):
            raise NumericalAbort(f"autoencoder loss became {value} at step {len(history)}")
        opt.step(ad.grad(loss, ae.parameters()))
        history.append(value)
    return AutoencoderResult(ae, history)


def reconstruction_mse(ae: Autoencoder, images) -> float:
    arr = _check_images(images, "reconstruction_mse")
    errs = []
    with ad.no_grad():
        for i in range(0, len(arr), 32):
            x = _batch(arr, np.arange(i, min(i + 32, len(arr))), ae.dtype)
            errs.append(np.mean((ae(x).data.astype(np.float64) - x.data) ** 2, axis=(1, 2, 3)))
    return float(np.mean(np.concatenate(errs)))


# ------------------------------------------------------------------ losses


@dataclass
class CriticTerms:
    loss: Tensor
    wasserstein: float
    gp_term: float
    mean_grad_norm: float


def _as_batch(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        arr = np.asarray(x, dtype=dtype)
        t = Tensor(arr[:, None] if arr.ndim == 3 else arr)
    if t.ndim != 4:
        raise ShapeError(f"expected an (N, 1, H, W) batch, got shape {t.shape}")
    return t


def input_gradient_norms(critic: Callable, x_hat: Tensor, create_graph: bool) -> tuple[Tensor, Tensor]:
    """Per-sample ||grad_x D(x)||_2 at ``x_hat`` (which must require grad)."""
    scores = critic(x_hat)
    (g,) = ad.grad(ad.tsum(scores), [x_hat], create_graph=create_graph)
    sq = ad.tsum(ad.square(g), axis=tuple(range(1, g.ndim)))
    # tiny offset keeps the sqrt differentiable when the gradient vanishes
    return ad.sqrt(sq + 1e-12), scores


def critic_loss(critic: Callable, real, fake, lambda_gp: float = 10.0, gp_mode: str = "generated",
                rng: np.random.Generator | None = None, dtype=np.float32) -> CriticTerms:
    """WGAN critic loss with gradient penalty at generated samples or real/fake interpolates."""
    real = _as_batch(real, dtype)
    fake = _as_batch(fake, dtype)
    if real.shape != fake.shape:
        raise ShapeError(f"critic_loss: real batch {real.shape} vs fake batch {fake.shape}")
    if gp_mode not in GP_MODES:
        raise ParameterError(f"gp_mode must be one of {GP_MODES}, got {gp_mode!r}")
    fake = fake.detach()
    w_term = ad.mean(critic(fake)) - ad.mean(critic(real))
    if gp_mode == "generated":
        x_hat = Tensor(fake.data, requires_grad=True)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = rng.uniform(size=(real.shape[0],) + (1,) * (real.ndim - 1)).astype(real.dtype)
        x_hat = Tensor(eps * real.data + (1 - eps) * fake.data, requires_grad=True)
    if lambda_gp > 0:
        norms, _ = input_gradient_norms(critic, x_hat, create_graph=True)
        gp = ad.mean(ad.square(norms - 1.0))
        loss = w_term + lambda_gp * gp
        gp_value = float(gp.item())
    else:
        norms, _ = input_gradient_norms(critic, x_hat, create_graph=False)
        loss = w_term
        gp_value = float(np.mean((norms.data - 1.0) ** 2))
    return CriticTerms(loss, float(w_term.item()), gp_value, float(np.mean(norms.data)))


@dataclass
class GeneratorTerms:
    loss: Tensor
    adversarial: float
    phi_term: float
    within_gamma: float


def generator_loss(gen: Callable, critic: Callable, phi: Autoencoder | None, renders, mu_phi: float,
                   gamma: float = 1.0, dtype=np.float32) -> GeneratorTerms:
    """Adversarial term plus the feature-preservation penalty against the frozen autoencoder."""
    if phi is None or not isinstance(phi, Autoencoder):
        raise ConfigError("generator_loss needs a trained autoencoder as the feature extractor")
    p = _as_batch(renders, dtype)
    out = gen(p)
    adv = -ad.mean(critic(out))
    with ad.no_grad():
        phi_p = phi.encode(p).detach()
    if mu_phi > 0:
        diff = phi.encode(out) - phi_p
        dist2 = ad.tsum(ad.square(diff), axis=1)
        phi_term = ad.mean(dist2)
        loss = adv + mu_phi * phi_term
        d2 = dist2.data
    else:
        with ad.no_grad():
            d2 = np.sum((phi.encode(out).data - phi_p.data) ** 2, axis=1)
        phi_term = Tensor(np.float64(np.mean(d2)))
        loss = adv
    within = float(np.mean(np.sqrt(d2) < gamma))
    return GeneratorTerms(loss, float(adv.item()), float(phi_term.item()), within)


# ------------------------------------------------------------------ GAN loops


@dataclass
class GanResult:
    generator: object
    critic: Critic
    metrics: list[dict] = field(default_factory=list)


def _clip_params(params, c: float) -> None:
    for p in params:
        np.clip(p.data, -c, c, out=p.data)


class _MetricsLog:
    def __init__(self, path):
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._w = csv.writer(self._fh, lineterminator="\n")
            self._w.writerow(METRIC_FIELDS)

    def add(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._w.writerow([row["iter"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _save_pair(directory, tag: str, gen, critic) -> None:
    from .io import save_model

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(directory / f"{gen.kind}_{tag}.sfw", gen)
    save_model(directory / f"critic_{tag}.sfw", critic)


def _gan_loop(gen, critic: Critic, reals: np.ndarray, cfg: TrainConfig, fake_inputs: Callable,
              gen_terms: Callable, log_path, progress: Callable | None) -> GanResult:
    rng = np.random.default_rng([cfg.seed, 1])
    g_opt = Adam(gen.parameters(), cfg.lr, cfg.betas)
    d_opt = Adam(critic.parameters(), cfg.lr, cfg.betas)
    clipping = cfg.lipschitz_mode == "weight-clipping"
    lam = 0.0 if clipping else cfg.lambda_gp
    if clipping:
        _clip_params(critic.parameters(), cfg.clip_value)
    log = _MetricsLog(log_path)
    try:
        for it in range(cfg.iterations):
            c_vals, gp_vals, norm_vals = [], [], []
            for _ in range(cfg.n_critic):
                real = _batch(reals, rng.integers(0, len(reals), size=cfg.batch_size), critic.dtype)
                with ad.no_grad():
                    fake = gen(fake_inputs(rng)).detach()
                terms = critic_loss(critic, real, fake, lam, cfg.gp_mode, rng, critic.dtype)
                d_opt.step(ad.grad(terms.loss, critic.parameters()))
                if clipping:
                    _clip_params(critic.parameters(), cfg.clip_value)
                c_vals.append(float(terms.loss.item()))
                gp_vals.append(terms.gp_term)
                norm_vals.append(terms.mean_grad_norm)
            gt = gen_terms(fake_inputs(rng))
            g_opt.step(ad.grad(gt.loss, gen.parameters()))
            row = {
                "iter": it,
                "critic_loss": c_vals[-1],
                "gen_loss": float(gt.loss.item()),
                "gp_term": float(np.mean(gp_vals)),
                "phi_term": gt.phi_term,
                "mean_grad_norm": float(np.mean(norm_vals)),
            }
            log.add(row)
            if not all(math.isfinite(row[k]) for k in METRIC_FIELDS[1:]):
                where = ""
                if cfg.checkpoint_dir is not None:
                    _save_pair(cfg.checkpoint_dir, "nan_abort", gen, critic)
                    where = f"; diagnostic checkpoint in {cfg.checkpoint_dir}"
                raise NumericalAbort(f"non-finite loss at iteration {it}: {row}{where}")
            if cfg.checkpoint_every and cfg.checkpoint_dir is not None and (it + 1) % cfg.checkpoint_every == 0:
                _save_pair(cfg.checkpoint_dir, f"{it + 1:06d}", gen, critic)
            if progress is not None:
                progress(row)
    finally:
        log.close()
    return GanResult(gen, critic, log.rows)


def train_sasgan(renders, reals, phi: Autoencoder | None, cfg: TrainConfig,
                 gen_config: GeneratorConfig | None = None, critic_config: CriticConfig | None = None,
                 log_path=None, progress: Callable | None = None) -> GanResult:
    """Train the refiner G (renders -> realistic) against a critic on the real set."""
    cfg.validate()
    if phi is None:
        raise ConfigError("train_sasgan needs a trained autoencoder checkpoint (feature extractor)")
    renders = _check_images(renders, "train_sasgan renders")
    reals = _check_images(reals, "train_sasgan reals")
    if renders.shape[1:] != reals.shape[1:]:
        raise ShapeError(f"train_sasgan: render size {renders.shape[1:]} vs real size {reals.shape[1:]}")
    gen = Generator(gen_config or GeneratorConfig(), seed=cfg.seed)
    critic = Critic(critic_config or CriticConfig(image_size=reals.shape[1]), seed=cfg.seed + 1)

    def fake_inputs(rng):
        return _batch(renders, rng.integers(0, len(renders), size=cfg.batch_size), gen.dtype)

    def gen_terms(p):
        return generator_loss(gen, critic, phi, p, cfg.mu_phi, cfg.gamma, gen.dtype)

    return _gan_loop(gen, critic, reals, cfg, fake_inputs, gen_terms, log_path, progress)


@dataclass
class _BaselineTerms:
    loss: Tensor
    phi_term: float = 0.0


def train_dcgan(reals, cfg: TrainConfig, base_config: BaselineConfig | None = None,
                critic_config: CriticConfig | None = None, log_path=None,
                progress: Callable | None = None) -> GanResult:
    """Train the latent-to-image baseline with the same critic objective."""
    cfg.validate()
    reals = _check_images(reals, "train_dcgan reals")
    size = reals.shape[1]
    base = BaselineGenerator(base_config or BaselineConfig(image_size=size), seed=cfg.seed)
    if base.config.image_size != size:
        raise ShapeError(f"train_dcgan: baseline size {base.config.image_size} vs images {size}")
    critic = Critic(critic_config or CriticConfig(image_size=size), seed=cfg.seed + 1)

    def fake_inputs(rng):
        return Tensor(base.sample_latent(cfg.batch_size, rng))

    def gen_terms(z):
        return _BaselineTerms(-ad.mean(critic(base(z))))

    return _gan_loop(base, critic, reals, cfg, fake_inputs, gen_terms, log_path, progress)


def critic_gap(critic: Critic, gen_outputs: np.ndarray, reals: np.ndarray, batches: int = 20,
               batch_size: int = 4, seed: int = 0) -> np.ndarray:
    """mean D(real) - mean D(fake) over random held-out batches."""
    from .models import critic_forward

    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(batches):
        r = reals[rng.integers(0, len(reals), size=batch_size)]
        f = gen_outputs[rng.integers(0, len(gen_outputs), size=batch_size)]
        gaps.append(float(np.mean(critic_forward(critic, r)) - np.mean(critic_forward(critic, f))))
    return np.array(gaps)
