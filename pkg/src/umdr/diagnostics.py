"""Feature similarity diagnostics: per-sample cosine curves and 2-D PCA projections."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class SimilarityReport(NamedTuple):
    cosines: np.ndarray   # per-sample cosine similarity
    mean: float
    mean_abs: float
    zero_flags: np.ndarray  # True where either vector had zero norm (cosine set to 0)

    @property
    def warning(self) -> bool:
        return bool(self.zero_flags.any())


def cosine_similarity_report(feats_a, feats_b) -> SimilarityReport:
    """Row-wise cosine similarity of two M x D feature sets (a single D-vector also works)."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    denom = np.where(zero, 1.0, na * nb)
    cos = np.where(zero, 0.0, np.einsum("ij,ij->i", a, b) / denom)
    cos = np.clip(cos, -1.0, 1.0)
    return SimilarityReport(cos, float(cos.mean()), float(np.abs(cos).mean()), zero)


def pca_project(features, out_dim: int = 2) -> np.ndarray:
    """Center, eigendecompose the covariance and project onto the top ``out_dim`` axes.

    Each axis is signed so its largest-magnitude entry is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be M x D")
    M, D = x.shape
    if M < 2:
        raise ValueError("need at least two samples")
    if D < 2 or out_dim > D:
        raise ValueError(f"cannot project {D}-dim features to {out_dim} dims")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (M - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:out_dim]
    axes = vecs[:, order]
    signs = np.sign(axes[np.abs(axes).argmax(axis=0), np.arange(out_dim)])
    axes = axes * np.where(signs == 0, 1.0, signs)
    return xc @ axes
