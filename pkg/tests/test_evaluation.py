import numpy as np
import pytest

from sasforge.errors import ConfigError, DataError, ParameterError, ShapeError
from sasforge.evaluation import (
    FeatureStats,
    conditional_probabilities,
    correlation_shift,
    feature_stats,
    fid,
    nearest_neighbors,
    principal_axis_angle,
    psd_sqrt,
    stats_from_features,
    tsne,
    write_nn_csv,
    write_points_csv,
)
from sasforge.models import Autoencoder, AutoencoderConfig, ae_encode


def random_stats(rng, d):
    a = rng.normal(size=(d, d))
    return FeatureStats(rng.normal(size=d), a @ a.T / d)


# ---------------------------------------------------------------- FID

def test_fid_identical_is_zero():
    rng = np.random.default_rng(0)
    s = random_stats(rng, 16)
    assert fid(s, s) == pytest.approx(0.0, abs=1e-6)


def test_fid_scalar_closed_form():
    a = FeatureStats(np.array([0.0]), np.array([[1.0]]))
    b = FeatureStats(np.array([2.0]), np.array([[4.0]]))
    assert fid(a, b) == pytest.approx(5.0, abs=1e-6)


def test_fid_diagonal_closed_form():
    a = FeatureStats(np.zeros(2), np.eye(2))
    b = FeatureStats(np.array([1.0, 0.0]), np.eye(2))
    assert fid(a, b) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_fid_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 40))
    a, b = random_stats(rng, d), random_stats(rng, d)
    assert abs(fid(a, b) - fid(b, a)) < 1e-6
    assert fid(a, b) >= 0.0


def test_fid_rank_deficient_covariances_are_clamped():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(5, 32))
    s = stats_from_features(f)
    assert np.linalg.matrix_rank(s.cov) <= 4
    assert fid(s, s) == pytest.approx(0.0, abs=1e-6)
    assert fid(s, stats_from_features(rng.normal(size=(5, 32)))) >= 0.0


def test_fid_increases_with_mean_separation():
    rng = np.random.default_rng(4)
    base = random_stats(rng, 8)
    direction = rng.normal(size=8)
    values = [fid(base, FeatureStats(base.mean + delta * direction, base.cov)) for delta in np.linspace(0, 3, 13)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_fid_errors():
    a = FeatureStats(np.zeros(2), np.eye(2))
    with pytest.raises(ShapeError):
        fid(a, FeatureStats(np.zeros(3), np.eye(3)))
    with pytest.raises(DataError):
        fid(a, FeatureStats(np.array([np.nan, 0.0]), np.eye(2)))


def test_psd_sqrt_squares_back():
    rng = np.random.default_rng(5)
    s = random_stats(rng, 12).cov
    r = psd_sqrt(s)
    assert np.allclose(r @ r, s, atol=1e-10)
    assert np.allclose(r, r.T)


# ---------------------------------------------------------------- feature statistics

@pytest.fixture(scope="module")
def small_ae():
    return Autoencoder(AutoencoderConfig(32, (4, 4, 4, 4), 64), seed=0)


def test_identical_images_have_zero_covariance(small_ae):
    img = np.random.default_rng(0).random((32, 32))
    s = feature_stats(np.stack([img, img]), small_ae)
    assert s.mean.shape == (64,)
    assert s.cov.shape == (64, 64)
    assert np.all(s.cov == 0.0)


def test_feature_stats_matches_direct_summation(small_ae):
    imgs = np.random.default_rng(1).random((6, 32, 32))
    s = feature_stats(imgs, small_ae)
    f = ae_encode(small_ae, imgs).astype(np.float64)
    mean = sum(f[i] for i in range(6)) / 6
    cov = np.zeros((64, 64))
    for i in range(6):
        for j in range(64):
            for k in range(64):
                cov[j, k] += (f[i, j] - mean[j]) * (f[i, k] - mean[k])
    cov /= 5
    assert np.max(np.abs(s.mean - mean)) < 1e-10
    assert np.max(np.abs(s.cov - cov)) < 1e-10
    assert np.allclose(s.cov, s.cov.T, atol=1e-9)
    assert np.linalg.eigvalsh(s.cov).min() >= -1e-8


def test_feature_stats_needs_two_images(small_ae):
    with pytest.raises(DataError):
        feature_stats(np.zeros((1, 32, 32)), small_ae)


# ---------------------------------------------------------------- nearest neighbours

def test_self_query_returns_itself_first():
    data = np.random.default_rng(0).random((10, 8, 8))
    res = nearest_neighbors(data[4], data, k=3)
    assert res[0] == (4, 0.0)


def test_hand_computed_ordering():
    data = np.array([[[0.0, 0.0]], [[3.0, 4.0]], [[1.0, 0.0]]])
    res = nearest_neighbors(np.array([[0.0, 1.0]]), data, k=3)
    assert [i for i, _ in res] == [0, 2, 1]
    assert [d for _, d in res] == pytest.approx([1.0, np.sqrt(2.0), np.sqrt(18.0)])


def test_ties_break_by_lower_index():
    data = np.array([[[1.0]], [[-1.0]], [[1.0]]])
    assert nearest_neighbors(np.array([[0.0]]), data, k=3) == [(0, 1.0), (1, 1.0), (2, 1.0)]


@pytest.mark.parametrize("seed", range(5))
def test_nn_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    data = rng.random((15, 5, 5))
    q = rng.random((5, 5))
    naive = []
    for i in range(len(data)):
        acc = 0.0
        for r in range(5):
            for c in range(5):
                acc += (data[i, r, c] - q[r, c]) ** 2
        naive.append((np.sqrt(acc), i))
    naive.sort()
    res = nearest_neighbors(q, data, k=len(data))
    assert [i for i, _ in res] == [i for _, i in naive]
    assert [d for _, d in res] == pytest.approx([d for d, _ in naive], abs=1e-12)


def test_phi_metric(small_ae):
    data = np.random.default_rng(2).random((5, 32, 32))
    res = nearest_neighbors(data[2], data, k=5, metric="phi", phi=small_ae)
    # batched and single-image float32 encodings differ only by rounding
    assert res[0][0] == 2
    assert res[0][1] == pytest.approx(0.0, abs=1e-5)
    with pytest.raises(ConfigError):
        nearest_neighbors(data[2], data, k=1, metric="phi")


def test_nn_errors():
    data = np.zeros((3, 2, 2))
    with pytest.raises(ParameterError):
        nearest_neighbors(data[0], data, k=4)
    with pytest.raises(ParameterError):
        nearest_neighbors(data[0], data, k=1, metric="cosine")
    with pytest.raises(ShapeError):
        nearest_neighbors(np.zeros((3, 3)), data, k=1)


def test_nn_csv(tmp_path):
    path = tmp_path / "nn.csv"
    write_nn_csv(path, [[(3, 0.5), (1, 0.75)]], query_ids=["g0"], neighbor_ids=["a", "b", "c", "d"])
    assert path.read_text().splitlines() == ["query_id,rank,neighbor_id,distance", "g0,0,d,0.5", "g0,1,b,0.75"]


# ---------------------------------------------------------------- t-SNE

def clusters(rng, n_per=50, d=10, sep=20.0):
    centers = np.eye(3, d) * sep
    x = np.concatenate([c + rng.normal(size=(n_per, d)) for c in centers])
    return x, np.repeat(np.arange(3), n_per)


def test_perplexity_calibration():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 5))
    d2 = np.sum((x[:, None] - x[None]) ** 2, axis=-1)
    P, _ = conditional_probabilities(d2, 8.0)
    assert np.allclose(P.sum(axis=1), 1.0)
    assert np.all(np.diag(P) == 0)
    for row in P:
        p = row[row > 0]
        assert abs(-np.sum(p * np.log(p)) - np.log(8.0)) <= 1e-4


def test_tsne_separates_clusters():
    x, labels = clusters(np.random.default_rng(1))
    y = tsne(x, perplexity=30, iterations=1000, seed=0)
    d = np.sum((y[:, None] - y[None]) ** 2, axis=-1)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1)[:, :10]
    purity = np.mean(labels[nn] == labels[:, None])
    assert purity >= 0.9


def test_tsne_deterministic():
    x, _ = clusters(np.random.default_rng(2), n_per=15)
    a = tsne(x, perplexity=10, iterations=300, seed=5)
    b = tsne(x, perplexity=10, iterations=300, seed=5)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_tsne_duplicates_embed_close():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(60, 8)) * 3
    x[59] = x[7]
    y = tsne(x, perplexity=10, iterations=800, seed=1)
    d = np.sqrt(np.sum((y[:, None] - y[None]) ** 2, axis=-1))
    pairs = d[np.triu_indices(60, 1)]
    assert d[7, 59] <= np.quantile(pairs, 0.01)


def test_tsne_kl_settles_with_step_decay():
    monotone = 0
    trials = 10
    for t in range(trials):
        rng = np.random.default_rng(100 + t)
        x = rng.normal(size=(60, 10)) + np.repeat(rng.normal(scale=5, size=(3, 10)), 20, axis=0)
        res = tsne(x, perplexity=10, iterations=1000, seed=t, lr_decay=0.985, return_history=True)
        kl = np.array(res.kl_history)
        monotone += bool(np.all(np.diff(kl[len(kl) // 2:]) <= 0))
    assert monotone >= 0.9 * trials


@pytest.mark.parametrize("perplexity", [0.0, 20.0])
def test_tsne_rejects_infeasible_perplexity(perplexity):
    with pytest.raises(ParameterError):
        tsne(np.random.default_rng(0).normal(size=(30, 3)), perplexity=perplexity)


def test_tsne_rejects_tiny_inputs():
    with pytest.raises(ParameterError):
        tsne(np.zeros((3, 2)), perplexity=0.5)


def test_points_csv(tmp_path):
    write_points_csv(tmp_path / "t.csv", np.array([[0.5, -1.0]]), labels=["real"])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["index,label,x,y", "0,real,0.5,-1.0"]


# ---------------------------------------------------------------- geometry helpers

def test_correlation_shift_recovers_roll():
    rng = np.random.default_rng(0)
    a = rng.random((32, 32))
    b = np.roll(a, (3, -5), axis=(0, 1))
    assert correlation_shift(a, b) == (3, -5)


def test_principal_axis_angle():
    mask = np.zeros((21, 21), bool)
    for k in range(-8, 9):
        mask[10 + k, 10 + k] = True
    assert principal_axis_angle(mask) == pytest.approx(np.pi / 4)
    mask2 = np.zeros((21, 21), bool)
    mask2[10, 2:19] = True
    assert principal_axis_angle(mask2) == pytest.approx(0.0, abs=1e-12)
