"""Feature-space Frechet distance, nearest-neighbour audit, exact t-SNE."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ParameterError, ShapeError
from .models import Autoencoder, ae_encode


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int = 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def stats_from_features(features) -> FeatureStats:
    """Sample mean and unbiased covariance of an (N, d) feature matrix."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {f.shape}")
    if len(f) < 2:
        raise DataError(f"feature statistics need at least 2 samples, got {len(f)}")
    if not np.all(np.isfinite(f)):
        raise DataError("non-finite feature values")
    mu = f.mean(axis=0)
    centered = f - mu
    cov = centered.T @ centered / (len(f) - 1)
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(mu, cov, len(f))


def feature_stats(images, phi: Autoencoder) -> FeatureStats:
    arr = np.asarray(images)
    if arr.ndim != 3 or len(arr) < 2:
        raise DataError(f"feature_stats needs at least 2 images, got shape {arr.shape}")
    return stats_from_features(ae_encode(phi, arr).astype(np.float64))


def psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(C_a + C_b - 2 (C_b^1/2 C_a C_b^1/2)^1/2), clamped at 0."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape or a.cov.shape != (a.dim, a.dim):
        raise ShapeError(f"fid: stats dimensions differ ({a.mean.shape} vs {b.mean.shape})")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.cov))):
            raise DataError("fid: non-finite feature statistics")
    diff = a.mean - b.mean
    rb = psd_sqrt(b.cov)
    cross = psd_sqrt(rb @ a.cov @ rb)
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    return float(max(value, 0.0))


def fid_images(images_a, images_b, phi: Autoencoder) -> float:
    return fid(feature_stats(images_a, phi), feature_stats(images_b, phi))


# ------------------------------------------------------------------ nearest neighbours

METRICS = ("l2", "phi")


def nearest_neighbors(query, dataset, k: int, metric: str = "l2", phi: Autoencoder | None = None,
                      dataset_features: np.ndarray | None = None) -> list[tuple[int, float]]:
    """Exact k-NN by linear scan; ascending distance, ties broken by lower index.

    ``l2`` is the Euclidean distance between images; ``phi`` between their
    autoencoder features.
    """
    data = np.asarray(dataset, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if metric not in METRICS:
        raise ParameterError(f"metric must be one of {METRICS}, got {metric!r}")
    if not 1 <= k <= len(data):
        raise ParameterError(f"k must be in [1, {len(data)}], got {k}")
    if metric == "l2":
        if q.shape != data.shape[1:]:
            raise ShapeError(f"query shape {q.shape} vs dataset items {data.shape[1:]}")
        diff = data.reshape(len(data), -1) - q.reshape(1, -1)
    else:
        if phi is None:
            raise ConfigError("metric 'phi' needs an autoencoder checkpoint")
        feats = dataset_features if dataset_features is not None else ae_encode(phi, data)
        diff = np.asarray(feats, dtype=np.float64) - ae_encode(phi, q).astype(np.float64)[None]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.argsort(dist, kind="stable")[:k]
    return [(int(i), float(dist[i])) for i in order]


def write_nn_csv(path, results: list[list[tuple[int, float]]], query_ids=None, neighbor_ids=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "rank", "neighbor_id", "distance"])
        for qi, res in enumerate(results):
            qid = query_ids[qi] if query_ids is not None else qi
            for rank, (idx, d) in enumerate(res):
                w.writerow([qid, rank, neighbor_ids[idx] if neighbor_ids is not None else idx, repr(d)])


# ------------------------------------------------------------------ t-SNE


def _entropy_and_probs(d2_row: np.ndarray, beta: float):
    p = np.exp(-(d2_row - d2_row.min()) * beta)
    s = p.sum()
    p /= s
    # Shannon entropy in nats of the conditional distribution
    h = -np.sum(p[p > 0] * np.log(p[p > 0]))
    return h, p


def conditional_probabilities(d2: np.ndarray, perplexity: float, tol: float = 1e-4, max_iter: int = 200):
    """Row-wise Gaussian affinities whose entropy matches log(perplexity) within ``tol``."""
    n = len(d2)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        row = np.delete(d2[i], i)
        lo, hi = 0.0, np.inf
        beta = 1.0 / max(np.median(row), 1e-12)
        h, p = _entropy_and_probs(row, beta)
        for _ in range(max_iter):
            if abs(h - target) <= tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            h, p = _entropy_and_probs(row, beta)
        betas[i] = beta
        P[i, np.arange(n) != i] = p
    return P, betas


@dataclass
class TsneResult:
    points: np.ndarray
    kl_history: list[float]


def tsne(features, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
         learning_rate: float = 200.0, exaggeration: float = 12.0, exaggeration_iters: int = 250,
         lr_decay: float = 1.0, return_history: bool = False):
    """Exact O(N^2) t-SNE to two dimensions.

    After the exaggeration phase the step size is multiplied by ``lr_decay``
    every iteration (1.0 keeps it constant); values around 0.985 make the KL
    divergence settle monotonically.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"tsne expects an (N, d) matrix, got shape {x.shape}")
    n = len(x)
    if n < 4:
        raise ParameterError(f"tsne needs at least 4 points, got {n}")
    if not 0 < perplexity < (n - 1) / 3.0:
        raise ParameterError(f"perplexity must be in (0, {(n - 1) / 3.0:g}) for N={n}, got {perplexity}")
    if iterations < 0:
        raise ParameterError("iterations must be >= 0")
    if not 0 < lr_decay <= 1:
        raise ParameterError(f"lr_decay must be in (0, 1], got {lr_decay}")
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    P, _ = conditional_probabilities(d2, perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    for t in range(iterations):
        exag = exaggeration if t < exaggeration_iters else 1.0
        momentum = 0.5 if t < exaggeration_iters else 0.8
        yy = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + np.maximum(yy[:, None] + yy[None, :] - 2.0 * y @ y.T, 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        pq = (exag * P - Q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        lr = learning_rate * lr_decay ** max(t - exaggeration_iters, 0)
        update = momentum * update - lr * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        history.append(float(np.sum(P * np.log(P / Q))))
    if not np.all(np.isfinite(y)):
        raise DataError("tsne diverged to non-finite coordinates")
    return TsneResult(y, history) if return_history else y


def write_points_csv(path, points: np.ndarray, labels=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "x", "y"] if labels is not None else ["index", "x", "y"])
        for i, (a, b) in enumerate(points):
            row = [i] + ([labels[i]] if labels is not None else []) + [repr(float(a)), repr(float(b))]
            w.writerow(row)


# ------------------------------------------------------------------ image geometry helpers


def correlation_shift(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """(drow, dcol) maximising the circular cross-correlation of mean-removed ``b`` against ``a``.

    A positive shift means the content of ``b`` sits further down/right than in ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"correlation_shift: shapes {a.shape} and {b.shape}")
    fa = np.fft.rfft2(a - a.mean())
    fb = np.fft.rfft2(b - b.mean())
    corr = np.fft.irfft2(np.conj(fa) * fb, s=a.shape)
    r, c = np.unravel_index(np.argmax(corr), corr.shape)
    h, w = a.shape
    return (int(r if r <= h // 2 else r - h), int(c if c <= w // 2 else c - w))


def principal_axis_angle(mask: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Orientation in (-pi/2, pi/2] of the major axis of a pixel region (x = column, y = row)."""
    rows, cols = np.nonzero(mask)
    if len(rows) < 2:
        raise DataError("principal_axis_angle: region has fewer than 2 pixels")
    wts = np.ones(len(rows)) if weights is None else np.asarray(weights, dtype=np.float64)[rows, cols]
    wts = wts / wts.sum()
    x = cols - np.sum(wts * cols)
    y = rows - np.sum(wts * rows)
    sxx, syy, sxy = np.sum(wts * x * x), np.sum(wts * y * y), np.sum(wts * x * y)
    return float(0.5 * np.arctan2(2.0 * sxy, sxx - syy))
