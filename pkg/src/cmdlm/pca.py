"""PCA reconstruction-error anomaly scoring over command embeddings.

A projector keeps the top principal directions of the embedding cloud; a
command's anomaly score is the squared distance between its embedding and
that embedding projected onto the retained subspace. Rare structure that the
dominant directions cannot express reconstructs poorly and scores high.

The default is uncentered PCA (SVD of the raw embedding matrix, subspace
through the origin); centered mode subtracts the sample mean first and is
available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus


@dataclass(frozen=True)
class PCAProjector:
    """Orthonormal rows spanning the retained subspace."""

    components: np.ndarray            # (p, q), orthonormal rows
    mean: np.ndarray | None           # (q,) in centered mode, else None
    retained_fraction: float

    @property
    def p(self) -> int:
        return self.components.shape[0]

    @property
    def q(self) -> int:
        return self.components.shape[1]


def fit_pca(
    embeddings: np.ndarray,
    retained_fraction: float,
    centered: bool = False,
) -> PCAProjector:
    """Fit a projector keeping the smallest p whose squared singular values
    cover `retained_fraction` of the total squared-singular-value mass.

    Rows get a fixed sign convention (largest-magnitude entry positive) so
    repeated fits of the same data produce the same matrix.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_pca needs at least 2 embeddings of equal dimension")
    if not 0.0 < retained_fraction <= 1.0:
        raise ValueError("retained_fraction must lie in (0, 1]")

    mean = None
    if centered:
        mean = x.mean(axis=0)
        x = x - mean

    _, s, vt = np.linalg.svd(x, full_matrices=False)
    power = s * s
    total = power.sum()
    if total <= 0.0:
        # Degenerate all-zero data: a single arbitrary direction reconstructs it exactly.
        p = 1
    else:
        cum = np.cumsum(power) / total
        p = int(np.searchsorted(cum, retained_fraction - 1e-12) + 1)
        p = min(p, vt.shape[0])
    w = vt[:p].copy()
    # Sign convention: make each row's largest-magnitude entry positive.
    idx = np.argmax(np.abs(w), axis=1)
    signs = np.sign(w[np.arange(p), idx])
    signs[signs == 0] = 1.0
    w = w * signs[:, None]
    return PCAProjector(components=w, mean=mean, retained_fraction=retained_fraction)


def reconstruction_error(proj: PCAProjector, v: np.ndarray) -> float:
    """Squared distance between v and its projection onto the retained subspace."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (proj.q,):
        raise ValueError(f"expected a vector of dimension {proj.q}, got shape {v.shape}")
    x = v - proj.mean if proj.mean is not None else v
    residual = x - proj.components.T @ (proj.components @ x)
    return float(residual @ residual)


def reconstruction_errors(proj: PCAProjector, vs: np.ndarray) -> np.ndarray:
    """Vectorized `reconstruction_error` over the rows of (n, q) data."""
    x = np.asarray(vs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != proj.q:
        raise ValueError(f"expected (n, {proj.q}) data, got shape {x.shape}")
    if proj.mean is not None:
        x = x - proj.mean
    residual = x - (x @ proj.components.T) @ proj.components
    return np.einsum("ij,ij->i", residual, residual)


def rank_by_error(
    proj: PCAProjector,
    corpus: Corpus,
    embedder,
) -> list[tuple[str, float]]:
    """Score every record by reconstruction error, highest first.

    `embedder` maps a list of texts to an (n, q) embedding matrix. Ties keep
    corpus order (stable sort).
    """
    vectors = embedder([r.text for r in corpus.records])
    errors = reconstruction_errors(proj, vectors)
    order = np.argsort(-errors, kind="stable")
    return [(corpus.records[i].record_id, float(errors[i])) for i in order]
