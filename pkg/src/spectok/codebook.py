"""K-means codebook fitting and exact nearest-centroid tokenization.

Token id = index of the nearest centroid under squared L2 distance, ties
broken toward the lowest index. Assignment uses the blocked expansion
||x||^2 - 2 x.c + ||c||^2 with precomputed centroid norms; at the production
scale (V = 16384, k = 128) an exact pass is far cheaper than the per-file
time budget, so no approximate index is involved and tokenization stays
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

MAX_VOCAB = 65_536          # token ids must fit an unsigned 2-byte integer
ASSIGN_BLOCK_ROWS = 8_192   # rows of data per distance block

# Lloyd stops when the relative objective improvement drops below this.
CONVERGENCE_RTOL = 1e-6


@dataclass
class Codebook:
    """V centroids in reduced space; fitting diagnostics ride along."""

    centroids: np.ndarray       # V x k
    seed: int
    iterations_run: int = 0
    final_objective: float = 0.0
    objective_history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.objective_history = np.asarray(self.objective_history, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise DataError(f"centroids must be 2-D, got shape {self.centroids.shape}")
        if self.V > MAX_VOCAB:
            raise DataError(f"vocabulary {self.V} exceeds the 2-byte token space ({MAX_VOCAB})")
        if not np.all(np.isfinite(self.centroids)):
            raise DataError("centroids contain non-finite values")

    @property
    def V(self) -> int:
        return self.centroids.shape[0]

    @property
    def k(self) -> int:
        return self.centroids.shape[1]


@dataclass
class TokenSequence:
    """Integer tokens for one clip, in frame order."""

    clip_id: str
    tokens: np.ndarray              # uint16, each < V
    frames_per_second: float

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= MAX_VOCAB):
            raise DataError(f"token ids outside [0, {MAX_VOCAB})")
        self.tokens = tokens.astype(np.uint16)

    def __len__(self) -> int:
        return int(self.tokens.size)


def _nearest(centroids: np.ndarray, data: np.ndarray, centroid_norms: np.ndarray | None = None):
    """Blocked argmin over centroids; returns (labels, squared distances)."""
    if centroid_norms is None:
        centroid_norms = np.einsum("ij,ij->i", centroids, centroids)
    n = data.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for start in range(0, n, ASSIGN_BLOCK_ROWS):
        block = data[start : start + ASSIGN_BLOCK_ROWS]
        d2 = np.einsum("ij,ij->i", block, block)[:, None] - 2.0 * (block @ centroids.T) + centroid_norms
        idx = np.argmin(d2, axis=1)  # argmin takes the first minimum: lowest-index tie rule
        rows = np.arange(block.shape[0])
        labels[start : start + block.shape[0]] = idx
        dists[start : start + block.shape[0]] = d2[rows, idx]
    return labels, np.maximum(dists, 0.0)


def _kmeans_pp_init(data: np.ndarray, V: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ seeding: each new centroid drawn with prob proportional to D^2."""
    n = data.shape[0]
    centroids = np.empty((V, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = data[first]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for i in range(1, V):
        total = d2.sum()
        if total <= 0:
            # All remaining mass sits on existing centroids; fall back to uniform draws.
            choice = int(rng.integers(n))
        else:
            choice = int(rng.choice(n, p=d2 / total))
        centroids[i] = data[choice]
        d2 = np.minimum(d2, np.sum((data - centroids[i]) ** 2, axis=1))
    return centroids


def _repair_empty_clusters(
    data: np.ndarray, centroids: np.ndarray, labels: np.ndarray, dists: np.ndarray
) -> None:
    """Give each empty cluster the farthest point of the highest-variance cluster."""
    V = centroids.shape[0]
    counts = np.bincount(labels, minlength=V)
    for empty in np.flatnonzero(counts == 0):
        variances = np.full(V, -1.0)
        for c in np.flatnonzero(counts >= 2):
            variances[c] = dists[labels == c].mean()
        donor = int(np.argmax(variances))
        if variances[donor] < 0:
            continue  # fewer distinct points than clusters; nothing to split
        members = np.flatnonzero(labels == donor)
        farthest = members[int(np.argmax(dists[members]))]
        centroids[empty] = data[farthest]
        labels[farthest] = empty
        dists[farthest] = 0.0
        counts[donor] -= 1
        counts[empty] += 1


def fit_kmeans(data: np.ndarray, V: int, max_iters: int = 25, seed: int = 0) -> Codebook:
    """Lloyd's algorithm with seeded k-means++ init.

    Stops at ``max_iters`` or when the relative objective improvement falls
    below 1e-6. The recorded objective history (mean squared distance to the
    assigned centroid, one entry per iteration) is non-increasing.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DataError(f"data must be 2-D, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise DataError("data contains non-finite values")
    n = data.shape[0]
    if not 1 <= V <= n:
        raise DataError(f"need 1 <= V <= n points; got V={V}, n={n}")
    if V > MAX_VOCAB:
        raise DataError(f"vocabulary {V} exceeds the 2-byte token space ({MAX_VOCAB})")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(data, V, rng)

    history: list[float] = []
    prev = np.inf
    iterations = 0
    for _ in range(max_iters):
        labels, dists = _nearest(centroids, data)
        _repair_empty_clusters(data, centroids, labels, dists)
        objective = float(dists.mean())
        history.append(objective)
        iterations += 1

        # Centroid update: mean of each cluster's members.
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, data)
        counts = np.bincount(labels, minlength=V).astype(np.float64)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        if np.isfinite(prev) and prev - objective <= CONVERGENCE_RTOL * max(abs(prev), 1e-30):
            break
        prev = objective

    final = float(_nearest(centroids, data)[1].mean())
    return Codebook(
        centroids=centroids,
        seed=seed,
        iterations_run=iterations,
        final_objective=final,
        objective_history=np.asarray(history),
    )


def assign(
    book: Codebook,
    frames: np.ndarray,
    clip_id: str = "",
    frames_per_second: float = 8.0,
) -> TokenSequence:
    """Tokenize reduced frames: token[i] = argmin_c ||frame_i - centroid_c||^2."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != book.k:
        raise ShapeError(f"frames shape {frames.shape} incompatible with codebook k={book.k}")
    labels, _ = _nearest(book.centroids, frames)
    return TokenSequence(clip_id=clip_id, tokens=labels, frames_per_second=frames_per_second)


def kmeans_objective(book: Codebook, data: np.ndarray) -> float:
    """Mean squared distance from each row to its nearest centroid."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != book.k:
        raise ShapeError(f"data shape {data.shape} incompatible with codebook k={book.k}")
    if data.shape[0] == 0:
        return 0.0
    return float(_nearest(book.centroids, data)[1].mean())
