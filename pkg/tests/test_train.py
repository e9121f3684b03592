import numpy as np
import pytest

from sasforge import autodiff as ad
from sasforge.errors import ConfigError, DataError, NumericalAbort, ParameterError, ShapeError
from sasforge.io import load_model
from sasforge.models import (
    Autoencoder,
    AutoencoderConfig,
    BaselineConfig,
    BaselineGenerator,
    Critic,
    CriticConfig,
    Generator,
    GeneratorConfig,
    baseline_generate,
)
from sasforge.train import (
    METRIC_FIELDS,
    TrainConfig,
    critic_gap,
    critic_loss,
    generator_loss,
    reconstruction_mse,
    train_autoencoder,
    train_dcgan,
    train_sasgan,
)

SIZE = 32
SMALL_AE = AutoencoderConfig(SIZE, (4, 4, 4, 4), 64)
SMALL_GEN = GeneratorConfig(4, 1)
SMALL_CRITIC = CriticConfig(SIZE, (4, 8))
SMALL_BASE = BaselineConfig(SIZE, 8, (8, 8), 8)


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, SIZE, SIZE))


@pytest.fixture(scope="module")
def phi():
    return Autoencoder(SMALL_AE, seed=0)


def linear_critic(scale):
    return lambda x: scale * ad.tsum(x, axis=(1, 2, 3))


def tiny_cfg(**kw):
    base = dict(iterations=3, n_critic=2, batch_size=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config

@pytest.mark.parametrize(
    "kw",
    [dict(lr=0), dict(batch_size=0), dict(n_critic=0), dict(gamma=0), dict(iterations=-1),
     dict(gp_mode="both"), dict(lipschitz_mode="spectral"), dict(clip_value=0), dict(mu_phi=-1)],
)
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        TrainConfig(**kw).validate()


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.lambda_gp, cfg.n_critic) == (1e-3, 4, 10.0, 5)
    assert cfg.gp_mode == "generated"


# ---------------------------------------------------------------- critic loss

@pytest.mark.parametrize("gp_mode", ["generated", "interpolate"])
def test_linear_critic_penalty_closed_form(gp_mode):
    n = 8 * 8
    real, fake = np.random.default_rng(0).random((2, 3, 8, 8))
    terms = critic_loss(linear_critic(3.0), real, fake, lambda_gp=10.0, gp_mode=gp_mode, dtype=np.float64)
    expected_gp = (3.0 * np.sqrt(n) - 1.0) ** 2
    assert terms.gp_term == pytest.approx(expected_gp, rel=1e-9)
    assert terms.mean_grad_norm == pytest.approx(3.0 * np.sqrt(n), rel=1e-9)
    w = 3.0 * (fake.sum(axis=(1, 2)).mean() - real.sum(axis=(1, 2)).mean())
    assert terms.wasserstein == pytest.approx(w, rel=1e-9)
    assert terms.loss.item() == pytest.approx(w + 10.0 * expected_gp, rel=1e-9)


def test_constant_critic_without_penalty_is_zero():
    real, fake = images(2, 1)[:, None], images(2, 2)[:, None]
    const = lambda x: ad.tsum(x * 0.0, axis=(1, 2, 3)) + 5.0
    assert critic_loss(const, real, fake, lambda_gp=0.0).loss.item() == 0.0


def test_unit_gradient_critic_has_no_penalty():
    n = 8 * 8
    real, fake = np.random.default_rng(1).random((2, 4, 8, 8))
    terms = critic_loss(linear_critic(1.0 / np.sqrt(n)), real, fake, 10.0, dtype=np.float64)
    assert terms.gp_term == pytest.approx(0.0, abs=1e-12)


def test_penalty_gradient_reaches_critic_weights():
    critic = Critic(SMALL_CRITIC, seed=0)
    terms = critic_loss(critic, images(2, 0), images(2, 1), 10.0)
    grads = ad.grad(terms.loss, critic.parameters())
    assert all(np.all(np.isfinite(g.data)) for g in grads)
    assert any(np.any(g.data != 0) for g in grads)


def test_critic_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        critic_loss(linear_critic(1.0), images(2), images(3), 10.0)


# ---------------------------------------------------------------- generator loss

def test_generator_loss_without_penalty_is_adversarial(phi):
    gen, critic = Generator(SMALL_GEN, seed=0), Critic(SMALL_CRITIC, seed=1)
    t = generator_loss(gen, critic, phi, images(2), mu_phi=0.0)
    assert t.loss.item() == pytest.approx(t.adversarial)
    assert t.phi_term >= 0


def test_identity_generator_has_zero_feature_term(phi):
    t = generator_loss(lambda p: p, Critic(SMALL_CRITIC, seed=1), phi, images(3), mu_phi=5.0, gamma=0.5)
    assert t.phi_term == 0.0
    assert t.within_gamma == 1.0


def test_large_mu_gradient_follows_feature_term(phi):
    gen = Generator(GeneratorConfig(4, 1, final_scale=1.0), seed=2)
    critic = Critic(SMALL_CRITIC, seed=3)
    batch = images(2, 5)

    def flat_grad(loss):
        return np.concatenate([g.data.ravel() for g in ad.grad(loss, gen.parameters())]).astype(np.float64)

    mu = 1e4
    total = flat_grad(generator_loss(gen, critic, phi, batch, mu_phi=mu).loss)
    # a zero critic leaves only the feature term
    zero_critic = lambda x: ad.tsum(x * 0.0, axis=(1, 2, 3))
    feature_only = flat_grad(generator_loss(gen, zero_critic, phi, batch, mu_phi=mu).loss)
    cos = total @ feature_only / (np.linalg.norm(total) * np.linalg.norm(feature_only))
    assert cos > 0.9


def test_generator_loss_needs_feature_extractor():
    with pytest.raises(ConfigError):
        generator_loss(Generator(SMALL_GEN), Critic(SMALL_CRITIC), None, images(2), 1.0)


# ---------------------------------------------------------------- autoencoder training

def test_autoencoder_zero_iterations_is_init():
    res = train_autoencoder(images(3), TrainConfig(iterations=0, seed=4), SMALL_AE)
    fresh = Autoencoder(SMALL_AE, seed=4)
    for k, v in fresh.state_dict().items():
        assert np.array_equal(res.model.params[k].data, v)
    assert res.history == []


def test_autoencoder_memorizes_one_image():
    # smooth blob on a ramp; white noise is out of reach for a 2x2 bottleneck
    y, x = np.mgrid[0:SIZE, 0:SIZE] / (SIZE - 1)
    img = (0.2 + 0.5 * np.exp(-((x - 0.4) ** 2 + (y - 0.6) ** 2) / 0.05) + 0.2 * x)[None]
    res = train_autoencoder(img, TrainConfig(iterations=400, batch_size=1, lr=1e-3, seed=0),
                            AutoencoderConfig(SIZE, (8, 8, 8, 8), 256))
    assert all(np.isfinite(res.history))
    assert reconstruction_mse(res.model, img) < 1e-3


def test_autoencoder_rejects_bad_data():
    with pytest.raises(DataError):
        train_autoencoder(np.zeros((0, SIZE, SIZE)), TrainConfig(iterations=1), SMALL_AE)
    bad = images(2)
    bad[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        train_autoencoder(bad, TrainConfig(iterations=1), SMALL_AE)
    with pytest.raises(ShapeError):
        train_autoencoder(np.zeros((2, 16, 16)), TrainConfig(iterations=1), SMALL_AE)


# ---------------------------------------------------------------- GAN loops

def run_gan(phi, **kw):
    log_path = kw.pop("log_path", None)
    progress = kw.pop("progress", None)
    return train_sasgan(images(6, 1), images(6, 2), phi, tiny_cfg(**kw), SMALL_GEN, SMALL_CRITIC,
                        log_path=log_path, progress=progress)


def test_sasgan_zero_iterations_is_init(phi):
    res = run_gan(phi, iterations=0, seed=7)
    for model, fresh in [(res.generator, Generator(SMALL_GEN, seed=7)), (res.critic, Critic(SMALL_CRITIC, seed=8))]:
        for k, v in fresh.state_dict().items():
            assert np.array_equal(model.params[k].data, v)
    assert res.metrics == []


def test_sasgan_metrics_log_is_deterministic(phi, tmp_path):
    run_gan(phi, log_path=tmp_path / "a.csv")
    run_gan(phi, log_path=tmp_path / "b.csv")
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    lines = a.splitlines()
    assert lines[0] == ",".join(METRIC_FIELDS)
    assert len(lines) == 4
    assert all(np.isfinite(float(v)) for line in lines[1:] for v in line.split(","))


def capture_instances(monkeypatch, cls):
    made = []
    orig = cls.__init__

    def init(self, *a, **k):
        orig(self, *a, **k)
        made.append(self)

    monkeypatch.setattr(cls, "__init__", init)
    return made


def test_weight_clipping_bounds_every_step(phi, monkeypatch):
    c = 0.02
    critics = capture_instances(monkeypatch, Critic)
    seen = []

    def check(row):
        seen.append(max(float(np.abs(p.data).max()) for p in critics[0].parameters()))

    # one critic step per iteration so the progress hook sees every step
    run_gan(phi, iterations=3, n_critic=1, lipschitz_mode="weight-clipping", clip_value=c, progress=check)
    assert len(seen) == 3
    assert max(seen) <= c


def test_nan_aborts_with_diagnostic_checkpoint(phi, tmp_path, monkeypatch):
    gens = capture_instances(monkeypatch, Generator)

    def poison(row):
        for p in gens[0].parameters():
            p.data[...] = np.nan

    with pytest.raises(NumericalAbort):
        run_gan(phi, iterations=5, checkpoint_dir=str(tmp_path), progress=poison)
    assert (tmp_path / "generator_nan_abort.sfw").exists()
    assert (tmp_path / "critic_nan_abort.sfw").exists()


def test_periodic_checkpoints(phi, tmp_path):
    res = run_gan(phi, iterations=4, checkpoint_every=2, checkpoint_dir=str(tmp_path))
    assert sorted(p.name for p in tmp_path.glob("*.sfw")) == [
        "critic_000002.sfw", "critic_000004.sfw", "generator_000002.sfw", "generator_000004.sfw"]
    final = load_model(tmp_path / "generator_000004.sfw")
    for k, v in res.generator.state_dict().items():
        assert np.array_equal(final.params[k].data, v)


def test_sasgan_input_checks(phi):
    with pytest.raises(ConfigError):
        train_sasgan(images(2), images(2), None, tiny_cfg())
    with pytest.raises(DataError):
        train_sasgan(np.zeros((0, SIZE, SIZE)), images(2), phi, tiny_cfg())
    with pytest.raises(ShapeError):
        train_sasgan(images(2), np.zeros((2, 16, 16)), phi, tiny_cfg())


def test_dcgan_zero_iterations_and_fixed_latent(tmp_path):
    reals = images(6, 3)
    res0 = train_dcgan(reals, tiny_cfg(iterations=0, seed=2), SMALL_BASE, SMALL_CRITIC)
    fresh = BaselineGenerator(SMALL_BASE, seed=2)
    for k, v in fresh.state_dict().items():
        assert np.array_equal(res0.generator.params[k].data, v)
    res = train_dcgan(reals, tiny_cfg(), SMALL_BASE, SMALL_CRITIC, log_path=tmp_path / "d.csv")
    z = np.random.default_rng(0).standard_normal((2, 8)).astype(np.float32)
    assert np.array_equal(baseline_generate(res.generator, z), baseline_generate(res.generator, z))
    assert len(res.metrics) == 3
    assert all(r["phi_term"] == 0.0 for r in res.metrics)


def test_critic_gap_shape():
    gaps = critic_gap(Critic(SMALL_CRITIC, seed=0), images(5, 1), images(5, 2), batches=6)
    assert gaps.shape == (6,)
    assert np.all(np.isfinite(gaps))
