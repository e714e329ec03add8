"""Clustering kernels shared by every level: cosine k-means, spectral, PCA.

Sample matrices are plain (n, d) float arrays.  All routines are pure and
deterministic for a fixed seed; distance ties always resolve to the lowest
index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Stable 32-bit seed from a root seed plus stage/image identifiers."""
    entropy = [p if isinstance(p, int) else int.from_bytes(p.encode(), "little")
               for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class KmeansConfig:
    k: int
    max_iters: int = 300
    rel_tol: float = 1e-4
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.rel_tol < 0:
            raise ValueError(f"rel_tol must be >= 0, got {self.rel_tol}")


@dataclass
class SpectralConfig:
    sigma: float | None = None  # None = median pairwise cosine distance
    max_iters: int = 300
    rel_tol: float = 1e-4
    restarts: int = 10
    seed: int = 0
    max_n: int = 50_000  # dense n x n affinity guard


@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray  # (n,) int
    centroids: np.ndarray    # (k, d)
    inertia: float
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)


def _as_samples(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected an (n, d) sample matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("sample matrix contains non-finite values")
    return m


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - a.b / (|a| |b|), in [0, 2]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for zero-norm input")
    return float(np.clip(1.0 - a.dot(b) / (na * nb), 0.0, 2.0))


def l2_normalize(m: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm; zero-norm rows are an error."""
    m = _as_samples(m)
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm row at index {int(zero[0])}")
    return m / norms[:, None]


def _sq_dists(m: np.ndarray, centroids: np.ndarray, x2: np.ndarray) -> np.ndarray:
    # ||x||^2 + ||c||^2 - 2 x.c, clipped at 0 against rounding
    d = (
        x2[:, None]
        - 2.0 * (m @ centroids.T)
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d, 0.0)


def _kmeanspp_init(m: np.ndarray, x2: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = m.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = _sq_dists(m, m[chosen[:1]], x2).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a centroid; take the
            # lowest-index sample not yet chosen
            mask = np.ones(n, dtype=bool)
            mask[chosen[:j]] = False
            chosen[j] = np.flatnonzero(mask)[0] if mask.any() else 0
        else:
            chosen[j] = rng.choice(n, p=d2 / total)
        d2 = np.minimum(d2, _sq_dists(m, m[chosen[j]:chosen[j] + 1], x2).ravel())
    return m[chosen].copy()


def _lloyd(m: np.ndarray, x2: np.ndarray, k: int, cfg: KmeansConfig, rng: np.random.Generator):
    n = m.shape[0]
    centroids = _kmeanspp_init(m, x2, k, rng)
    history: list[float] = []
    assignments = np.zeros(n, dtype=np.int64)
    prev_inertia = np.inf
    for it in range(cfg.max_iters):
        d2 = _sq_dists(m, centroids, x2)
        assignments = np.argmin(d2, axis=1)
        inertia = float(np.sum(d2[np.arange(n), assignments], dtype=np.float64))
        history.append(inertia)
        if it > 0 and prev_inertia - inertia <= cfg.rel_tol * max(prev_inertia, 1e-300):
            break
        prev_inertia = inertia
        # means update via one-hot matmul (scatter-add is too slow at 1M rows)
        counts = np.bincount(assignments, minlength=k)
        onehot = np.zeros((n, k), dtype=m.dtype)
        onehot[np.arange(n), assignments] = 1
        sums = onehot.T @ m
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty][:, None].astype(m.dtype)
        # empty-cluster repair: re-seed from the farthest point, never fail
        if not nonempty.all():
            point_d2 = d2[np.arange(n), assignments]
            order = np.argsort(-point_d2, kind="stable")
            used = 0
            for c in np.flatnonzero(~nonempty):
                centroids[c] = m[order[used]]
                used += 1
    return assignments, centroids, history


def kmeans(m: np.ndarray, cfg: KmeansConfig) -> ClusterResult:
    """Euclidean k-means: k-means++ seeding, Lloyd iterations, best restart.

    Deterministic for a fixed cfg.seed; an empty cluster is re-seeded from
    the farthest point instead of failing.
    """
    m = _as_samples(m)
    n = m.shape[0]
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds sample count n={n}")
    rng = np.random.default_rng(cfg.seed)
    x2 = np.einsum("ij,ij->i", m, m)
    best: ClusterResult | None = None
    for _ in range(max(cfg.restarts, 1)):
        assignments, centroids, history = _lloyd(m, x2, cfg.k, cfg, rng)
        inertia = history[-1]
        if best is None or inertia < best.inertia:
            best = ClusterResult(
                k=cfg.k,
                assignments=assignments,
                centroids=centroids,
                inertia=inertia,
                n_iter=len(history),
                inertia_history=history,
            )
    return best


def cosine_kmeans(m: np.ndarray, cfg: KmeansConfig) -> ClusterResult:
    """k-means under cosine distance: L2-normalize rows, then Euclidean
    k-means (squared distance between unit vectors is 2(1 - x1.x2))."""
    return kmeans(l2_normalize(m), cfg)


def spectral_cluster(m: np.ndarray, k: int, cfg: SpectralConfig | None = None) -> np.ndarray:
    """Normalized spectral clustering over a dense cosine-distance affinity.

    Affinity W_ij = exp(-cosdist(x_i, x_j)^2 / (2 sigma^2)) with sigma
    defaulting to the median off-diagonal pairwise distance, symmetric
    normalized Laplacian, k smallest-eigenvalue eigenvectors, row-normalized
    embedding, then k-means.  Returns the (n,) assignment vector.
    """
    cfg = cfg or SpectralConfig()
    m = _as_samples(m)
    n = m.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds sample count n={n}")
    if n > cfg.max_n:
        raise ValueError(f"n={n} exceeds dense-affinity guard ({cfg.max_n})")
    xn = l2_normalize(np.asarray(m, dtype=np.float64))
    cosdist = 1.0 - np.clip(xn @ xn.T, -1.0, 1.0)
    if cfg.sigma is None:
        off = cosdist[~np.eye(n, dtype=bool)]
        sigma = float(np.median(off)) if off.size else 1.0
    else:
        sigma = float(cfg.sigma)
    sigma = max(sigma, 1e-12)
    w = np.exp(-(cosdist ** 2) / (2.0 * sigma ** 2))
    d_isqrt = 1.0 / np.sqrt(w.sum(axis=1))
    lap = np.eye(n) - (d_isqrt[:, None] * w * d_isqrt[None, :])
    eigvals, eigvecs = np.linalg.eigh(lap)
    embed = eigvecs[:, :k]
    norms = np.maximum(np.linalg.norm(embed, axis=1), 1e-12)
    embed = embed / norms[:, None]
    km = kmeans(embed, KmeansConfig(
        k=k, max_iters=cfg.max_iters, rel_tol=cfg.rel_tol,
        restarts=cfg.restarts, seed=cfg.seed,
    ))
    return km.assignments


def pca_project(m: np.ndarray, dims: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered projection onto the top-``dims`` covariance eigenvectors.

    Returns (n x dims projection, all d eigenvalues in descending order).
    Eigenvector signs are fixed so the largest-magnitude component is
    positive, keeping projections reproducible.
    """
    m = _as_samples(np.asarray(m, dtype=np.float64))
    n, d = m.shape
    if dims > d:
        raise ValueError(f"dims={dims} exceeds feature dimension d={d}")
    centered = m - m.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]
    flip = eigvecs[np.argmax(np.abs(eigvecs), axis=0), np.arange(d)] < 0
    eigvecs[:, flip] *= -1.0
    return centered @ eigvecs[:, :dims], eigvals
