"""PCA fitting and projection for normalized Mel frames.

The fit path goes through the sample covariance (dims x dims) rather than a
full SVD of the frame matrix: covariance accumulation is single-pass and
memory-bounded no matter how many frames come in. Components are unit-norm
eigenvectors with a deterministic sign (largest-magnitude entry positive),
no whitening.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

# Eigenvalues at or below this fraction of the largest are treated as rank
# deficiency: their variance ratio is reported as exactly zero.
DEGENERATE_RTOL = 1e-12


@dataclass
class PcaModel:
    """Column mean plus top-k orthonormal principal directions."""

    mean: np.ndarray                      # input_dim
    components: np.ndarray                # k x input_dim, rows orthonormal
    explained_variance_ratio: np.ndarray  # k, non-increasing, sums to <= 1
    input_dim: int
    k: int
    seed: int = 0
    degenerate: np.ndarray | None = None  # k bools, True where rank ran out

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.components = np.asarray(self.components, dtype=np.float64)
        self.explained_variance_ratio = np.asarray(self.explained_variance_ratio, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(self.k, dtype=bool)
        else:
            self.degenerate = np.asarray(self.degenerate, dtype=bool)

    def validate(self) -> None:
        if self.components.shape != (self.k, self.input_dim):
            raise ShapeError(
                f"components shape {self.components.shape} != ({self.k}, {self.input_dim})"
            )
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(self.k), atol=1e-6):
            raise DataError("component rows are not orthonormal")
        evr = self.explained_variance_ratio
        if np.any(evr < -1e-12) or evr.sum() > 1.0 + 1e-9 or np.any(np.diff(evr) > 1e-12):
            raise DataError("explained_variance_ratio must be non-increasing in [0, 1] with sum <= 1")


def fit_pca(frames: np.ndarray, k: int, seed: int = 0, subsample: int | None = None) -> PcaModel:
    """Fit a k-component PCA on the rows of ``frames``.

    ``subsample`` optionally limits the fit to that many seed-chosen rows
    (memory control on huge corpora); by default every row is used. If k
    exceeds the data rank the trailing ratios are zeroed and flagged
    degenerate; the components themselves stay orthonormal.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.size == 0:
        raise DataError(f"need a non-empty 2-D sample matrix, got shape {frames.shape}")
    n, dims = frames.shape
    if not 1 <= k <= dims:
        raise DataError(f"need 1 <= k <= input dim; got k={k}, dim={dims}")
    if subsample is not None and subsample < n:
        if subsample < k:
            raise DataError(f"subsample {subsample} is smaller than k={k}")
        rows = np.random.default_rng(seed).choice(n, size=subsample, replace=False)
        rows.sort()
        frames = frames[rows]
        n = subsample
    if n < k:
        raise DataError(f"need at least k={k} samples, got {n}")

    mean = frames.mean(axis=0)
    centered = frames - mean
    denom = max(n - 1, 1)
    cov = (centered.T @ centered) / denom

    eigvals, eigvecs = np.linalg.eigh(cov)       # ascending
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    components = eigvecs[:, order].T[:k].copy()
    eigvals_k = eigvals[:k]

    # Sign convention: the largest-magnitude entry of each component is positive.
    flip = components[np.arange(k), np.argmax(np.abs(components), axis=1)] < 0
    components[flip] *= -1.0

    total_var = float(eigvals.sum())
    if total_var > 0:
        ratios = eigvals_k / total_var
    else:
        ratios = np.zeros(k)
    degenerate = eigvals_k <= DEGENERATE_RTOL * eigvals[0]
    ratios = np.where(degenerate, 0.0, ratios)

    return PcaModel(
        mean=mean,
        components=components,
        explained_variance_ratio=ratios,
        input_dim=dims,
        k=k,
        seed=seed,
        degenerate=degenerate,
    )


def pca_transform(model: PcaModel, frames: np.ndarray) -> np.ndarray:
    """Project rows into the retained subspace: (frames - mean) @ components.T."""
    frames = np.asarray(frames, dtype=np.float64)
    single = frames.ndim == 1
    if single:
        frames = frames[None, :]
    if frames.shape[1] != model.input_dim:
        raise ShapeError(f"frame width {frames.shape[1]} != model input_dim {model.input_dim}")
    out = (frames - model.mean) @ model.components.T
    return out[0] if single else out


def pca_reconstruct(model: PcaModel, reduced: np.ndarray) -> np.ndarray:
    """Map reduced rows back to input space (exact on rank-k data)."""
    reduced = np.asarray(reduced, dtype=np.float64)
    if reduced.shape[-1] != model.k:
        raise ShapeError(f"reduced width {reduced.shape[-1]} != model k {model.k}")
    return reduced @ model.components + model.mean
