"""Similarity scoring against labeled training neighbors.

Supervision labels are noisy: flagged lines are near-certainly bad, but an
unflagged line can still be malicious. Majority voting over all nearest
neighbors inherits that noise; restricting the candidate set to the
flagged-malicious entries and scoring a sample by its mean similarity to the
k closest of them sidesteps it. Both scorers are exposed so the two can be
compared.

Similarity is cosine; search is an exact linear scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EmbeddingIndex:
    record_ids: list[str]
    vectors: np.ndarray        # (n, q), rows L2-normalized at build time
    labels: np.ndarray         # (n,), 0/1 noisy labels

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.record_ids) != self.vectors.shape[0]:
            raise ValueError("index shape mismatch")
        if self.labels.shape != (self.vectors.shape[0],):
            raise ValueError("labels shape mismatch")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_malicious(self) -> int:
        return int(self.labels.sum())


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe


def index_from_embeddings(embeddings: np.ndarray, record_ids: list[str], labels: list[int]) -> EmbeddingIndex:
    """Build an exact-search index from precomputed embeddings.

    A zero embedding stays a zero row and has similarity 0 to everything.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(record_ids) or len(labels) != len(record_ids):
        raise ValueError("embeddings, record_ids, and labels must align")
    return EmbeddingIndex(
        record_ids=list(record_ids),
        vectors=_normalize_rows(x),
        labels=np.asarray(labels, dtype=np.int64),
    )


def build_index(params, vocab, labeled_corpus) -> EmbeddingIndex:
    """Embed every record of a labeled corpus (mean pooling) into an index.

    Records missing a noisy label count as unflagged (0).
    """
    from .transformer import embed_corpus_mean

    if not labeled_corpus.records:
        raise ValueError("labeled corpus is empty")
    texts = [r.text for r in labeled_corpus.records]
    embeddings = embed_corpus_mean(params, vocab, texts)
    labels = [labeled_corpus.labels.get(r.record_id, 0) for r in labeled_corpus.records]
    return index_from_embeddings(embeddings, [r.record_id for r in labeled_corpus.records], labels)


def _similarities(index: EmbeddingIndex, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (index.vectors.shape[1],):
        raise ValueError(f"query dimension {v.shape} does not match index ({index.vectors.shape[1]},)")
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros(len(index))
    return index.vectors @ (v / norm)


def _nearest(index: EmbeddingIndex, sims: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    # Deterministic: equal similarity breaks toward the lower record_id.
    order = sorted(candidates, key=lambda i: (-sims[i], index.record_ids[i]))
    return np.asarray(order[:k], dtype=np.int64)


def score_knn_malicious(index: EmbeddingIndex, v: np.ndarray, k: int = 1) -> float:
    """Mean cosine similarity to the k most similar flagged-malicious entries."""
    if k < 1:
        raise ValueError("k must be >= 1")
    malicious = np.flatnonzero(index.labels == 1)
    if malicious.size < k:
        raise ValueError(f"index holds {malicious.size} malicious entries; need at least k={k}")
    sims = _similarities(index, v)
    nearest = _nearest(index, sims, malicious, k)
    return float(sims[nearest].mean())


def score_knn_majority(index: EmbeddingIndex, v: np.ndarray, k: int = 1) -> tuple[float, int]:
    """Baseline: majority vote over the k nearest entries of any label.

    Returns (score, vote); the score is the mean similarity of the malicious
    entries among those k (0.0 when there are none), the vote is 1 iff
    strictly more than k/2 of them are malicious.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(index):
        raise ValueError(f"k={k} exceeds index size {len(index)}")
    sims = _similarities(index, v)
    nearest = _nearest(index, sims, np.arange(len(index)), k)
    mal = nearest[index.labels[nearest] == 1]
    vote = 1 if mal.size * 2 > k else 0
    score = float(sims[mal].mean()) if mal.size else 0.0
    return score, vote


def _batch_scores(index: EmbeddingIndex, vs: np.ndarray, candidates: np.ndarray,
                  k: int, majority: bool, chunk: int = 256):
    """Shared chunked scorer; candidate rows pre-sorted by record_id so that
    a stable argsort reproduces the scalar tie-break exactly."""
    order = sorted(candidates, key=lambda i: index.record_ids[i])
    cand = np.asarray(order, dtype=np.int64)
    sub = index.vectors[cand]
    labels = index.labels[cand]
    x = np.asarray(vs, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms > 0, norms, 1.0)
    zero_rows = norms[:, 0] == 0

    scores = np.empty(x.shape[0])
    votes = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], chunk):
        sims = x[start : start + chunk] @ sub.T
        sims[zero_rows[start : start + chunk]] = 0.0
        top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        rows = np.arange(top.shape[0])[:, None]
        top_sims = sims[rows, top]
        top_mal = labels[top] == 1
        n_mal = top_mal.sum(axis=1)
        mal_sum = (top_sims * top_mal).sum(axis=1)
        if majority:
            scores[start : start + chunk] = np.where(n_mal > 0, mal_sum / np.maximum(n_mal, 1), 0.0)
            votes[start : start + chunk] = (n_mal * 2 > k).astype(np.int64)
        else:
            scores[start : start + chunk] = top_sims.mean(axis=1)
    return scores, votes


def score_corpus_knn_malicious(index: EmbeddingIndex, vs: np.ndarray, k: int = 1) -> np.ndarray:
    """Vectorized `score_knn_malicious` over the rows of (n, q) queries."""
    if k < 1:
        raise ValueError("k must be >= 1")
    malicious = np.flatnonzero(index.labels == 1)
    if malicious.size < k:
        raise ValueError(f"index holds {malicious.size} malicious entries; need at least k={k}")
    scores, _ = _batch_scores(index, vs, malicious, k, majority=False)
    return scores


def score_corpus_knn_majority(index: EmbeddingIndex, vs: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `score_knn_majority` over the rows of (n, q) queries."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(index):
        raise ValueError(f"k={k} exceeds index size {len(index)}")
    return _batch_scores(index, vs, np.arange(len(index)), k, majority=True)


# --------------------------------------------------------------------------
# Persistence: versioned binary table of (record_id, label, vector)
# --------------------------------------------------------------------------

_MAGIC = b"CMDLMIDX1\n"


def save_index(index: EmbeddingIndex, path) -> None:
    import json

    header = {
        "n": len(index),
        "dim": int(index.vectors.shape[1]),
        "record_ids": index.record_ids,
        "labels": index.labels.tolist(),
        "dtype": "float64",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(np.ascontiguousarray(index.vectors, dtype=np.float64).tobytes())


def load_index(path) -> EmbeddingIndex:
    import json

    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not an embedding index file")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=np.float64).reshape(header["n"], header["dim"])
    return EmbeddingIndex(
        record_ids=list(header["record_ids"]),
        vectors=data.copy(),
        labels=np.asarray(header["labels"], dtype=np.int64),
    )
