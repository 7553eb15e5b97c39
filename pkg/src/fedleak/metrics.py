"""Leakage metrics: SSIM, RDLV, image identifiability precision, projections, bootstrap CIs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import ModelState, embed as model_embed, feature_dim


class MetricError(ValueError):
    pass


class UndefinedMetricError(MetricError, ZeroDivisionError):
    pass


# ---------------------------------------------------------------- SSIM


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    """Gaussian-windowed SSIM averaged over all valid window positions and channels.

    Images are H x W or H x W x C. Images smaller than the window use a
    window the size of the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = min(window, a.shape[0], a.shape[1])
    win = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def rdlv(target: np.ndarray, reconstruction: np.ndarray, prior: np.ndarray) -> float:
    """Relative data leakage: (SSIM(T, I) - SSIM(T, P)) / SSIM(T, P)."""
    return rdlv_from_ssim(ssim(target, reconstruction), ssim(target, prior))


def rdlv_from_ssim(ssim_recon: float, ssim_prior: float) -> float:
    if ssim_prior == 0:
        raise UndefinedMetricError("SSIM(target, prior) is zero; RDLV undefined")
    return (ssim_recon - ssim_prior) / ssim_prior


def best_match(reconstruction: np.ndarray, targets: np.ndarray) -> tuple[int, float]:
    """Index of the target most similar (SSIM) to ``reconstruction`` and that SSIM."""
    scores = [ssim(t, reconstruction) for t in targets]
    i = int(np.argmax(scores))
    return i, float(scores[i])


# ---------------------------------------------------------------- embeddings


class Embedder(Protocol):
    dim: int

    def __call__(self, images: np.ndarray) -> np.ndarray: ...


@dataclass
class ModelEmbedder:
    """Penultimate activations of a task model in eval mode."""

    state: ModelState

    @property
    def dim(self) -> int:
        return feature_dim(self.state.arch)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return model_embed(self.state, images)


@dataclass
class FunctionEmbedder:
    fn: Callable[[np.ndarray], np.ndarray]
    dim: int

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(images), dtype=np.float64)


def embed(image: np.ndarray, embedder: Embedder) -> np.ndarray:
    """Feature vector of a single H x W x C image."""
    return embedder(np.asarray(image)[None])[0]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / np.where(na == 0, 1, na)) @ (b / np.where(nb == 0, 1, nb)).T


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(cosine_matrix(np.atleast_2d(a), np.atleast_2d(b))[0, 0])


# ---------------------------------------------------------------- IIP


@dataclass(frozen=True)
class IIPMatch:
    reconstruction: int
    matched_id: str
    cosine: float
    is_exact: bool


@dataclass
class IIPResult:
    score: float
    n: int
    m: int
    k: int
    matches: list[IIPMatch] = field(default_factory=list)

    @property
    def mean_exact_cosine(self) -> float:
        vals = [mt.cosine for mt in self.matches if mt.is_exact]
        return float(np.mean(vals)) if vals else float("nan")


def iip_from_embeddings(
    recon_emb: np.ndarray,
    pool_emb: np.ndarray,
    pool_ids: Sequence[str],
    attacked_ids: Sequence[str],
    k: int = 1,
) -> IIPResult:
    """IIP from precomputed embeddings; see :func:`iip`."""
    if len(recon_emb) == 0:
        raise MetricError("no reconstructions")
    if len(pool_emb) == 0:
        raise MetricError("empty candidate pool")
    attacked = set(attacked_ids)
    sims = cosine_matrix(recon_emb, pool_emb)
    matches = []
    exact_ids: set[str] = set()
    for r in range(sims.shape[0]):
        # stable sort so ties resolve to the earlier pool entry
        order = np.argsort(-sims[r], kind="stable")[:k]
        hit = next((j for j in order if pool_ids[j] in attacked), None)
        j = int(order[0]) if hit is None else int(hit)
        exact = hit is not None
        matches.append(IIPMatch(r, pool_ids[j], float(sims[r, j]), exact))
        if exact:
            exact_ids.add(pool_ids[j])
    n = sims.shape[0]
    return IIPResult(len(exact_ids) / n, n, len(exact_ids), k, matches)


def iip(
    reconstructions: np.ndarray,
    pool_images: np.ndarray,
    pool_ids: Sequence[str],
    attacked_ids: Sequence[str],
    embedder: Embedder,
    k: int = 1,
) -> IIPResult:
    """Image identifiability precision adapted to FL.

    Each reconstruction's nearest pool image (cosine similarity of
    embeddings) counts as an exact match when it belongs to the attacked
    client's training set; with ``k > 1`` any of the k nearest may match.
    The score is the number of unique matched images over the number of
    reconstructions.
    """
    if len(reconstructions) == 0:
        raise MetricError("no reconstructions")
    return iip_from_embeddings(embedder(np.asarray(reconstructions)), embedder(np.asarray(pool_images)), list(pool_ids), attacked_ids, k)


# ---------------------------------------------------------------- projection and CIs


def project_2d(embeddings: np.ndarray, seed: int = 0, perplexity: float = 30.0) -> np.ndarray:
    """Seeded t-SNE projection to N x 2 coordinates."""
    from sklearn.manifold import TSNE

    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError("need at least two embeddings")
    perp = float(min(perplexity, max(1.0, (x.shape[0] - 1) / 3.0)))
    tsne = TSNE(n_components=2, perplexity=perp, random_state=seed, init="pca", method="exact")
    # identical points make PCA init degenerate; a tiny seeded jitter keeps it finite
    if np.allclose(x, x[0]):
        x = x + np.random.default_rng(seed).normal(0, 1e-6, x.shape)
    return tsne.fit_transform(x)


def bootstrap_ci(values: Sequence[float], trials: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap confidence interval of the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise MetricError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, v.size, size=(trials, v.size))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    m = float(v.mean())
    # quantiles of a constant sample can drift by an ulp from the mean
    return float(min(lo, m)), float(max(hi, m))
