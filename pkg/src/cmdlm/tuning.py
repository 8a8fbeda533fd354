"""Injecting noisy supervision into the pretrained encoder.

Three routes, all driven by 0/1 labels from the supervision source:

* reconstruction tuning: alternate between fitting the PCA projector on the
  current embeddings and nudging the encoder so that labeled-malicious lines
  carry the reconstruction-error mass. The objective is
  -log(sum_i err_i * y_i / sum_i err_i), driven to 0 when only flagged lines
  reconstruct poorly.
* classification tuning: freeze the encoder, train a small two-layer head on
  the [CLS] embedding with a negative log-likelihood objective.
* multi-line classification: same head, but the input is the anchor command
  joined with up to window-1 recent commands of the same user ("; "-separated)
  when the gaps between them are small enough.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bpe
from .autodiff import Tensor
from .corpus import Corpus
from .optim import AdamW
from .pca import PCAProjector, fit_pca, reconstruction_errors
from .transformer import ModelParams, embed_corpus_cls, embed_corpus_mean, forward_batch

EPS = 1e-12  # guards the ratio inside the log for degenerate batches


@dataclass
class TuneConfig:
    learning_rate: float = 5e-5
    epochs: int = 5
    batch_size: int = 32
    recon_rounds: int = 5
    retained_fraction: float = 0.95
    multiline_window: int = 3
    multiline_max_gap: int = 600
    head_dim: int | None = None  # defaults to the model hidden size
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs, batch_size must be positive")
        if self.recon_rounds < 0:
            raise ValueError("recon_rounds must be >= 0")
        if self.multiline_window < 1 or self.multiline_max_gap < 0:
            raise ValueError("multiline_window/max_gap must be positive")


# --------------------------------------------------------------------------
# Reconstruction-based tuning
# --------------------------------------------------------------------------

def recon_ranking_loss(errors, labels) -> float:
    """-log of the fraction of reconstruction-error mass on positive labels.

    0 when every unit of error mass sits on positive-labeled samples;
    undefined (raises) without a positive label or without any error mass.
    """
    errors = np.asarray(errors, dtype=np.float64)
    labels = np.asarray(labels)
    if errors.shape != labels.shape:
        raise ValueError("errors and labels must align")
    if np.any(errors < 0):
        raise ValueError("reconstruction errors must be non-negative")
    if not np.any(labels == 1):
        raise ValueError("loss undefined without a positive label")
    total = errors.sum()
    if total <= 0:
        raise ValueError("loss undefined when all errors are zero")
    positive = errors[labels == 1].sum()
    if positive <= 0:
        raise ValueError("no error mass on positive labels (loss diverges)")
    return float(-math.log(positive / total))


def _pooled_mean_embeddings(params: ModelParams, vocab: bpe.Vocab, texts: list[str]) -> Tensor:
    """Mean-pooled embeddings with gradient tracking, padding-aware."""
    cfg = params.config
    seqs = [bpe.encode(vocab, t, cfg.max_len) for t in texts]
    T = max(len(s) for s in seqs)
    B = len(seqs)
    ids = np.full((B, T), bpe.PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.float32)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
        mask[b, : len(s)] = 1.0
    states = forward_batch(params, ids, mask)
    weighted = ad.mul(states, mask[:, :, None])
    sums = ad.tsum(weighted, axis=1)
    return ad.div(sums, mask.sum(axis=1)[:, None])


def _batch_recon_loss(params, vocab, texts, labels, components: np.ndarray) -> Tensor:
    f = _pooled_mean_embeddings(params, vocab, texts)
    w = components.astype(f.dtype.type, copy=False)
    proj = ad.matmul(ad.matmul(f, Tensor(w.T)), Tensor(w))
    residual = ad.sub(proj, f)
    errors = ad.tsum(ad.mul(residual, residual), axis=1)
    y = np.asarray(labels, dtype=f.dtype.type)
    positive = ad.add(ad.tsum(ad.mul(errors, y)), EPS)
    total = ad.add(ad.tsum(errors), EPS)
    return ad.neg(ad.tlog(ad.div(positive, total)))


@dataclass
class ReconTuneHistory:
    round_losses: list[list[float]] = field(default_factory=list)
    ratio_before: float = float("nan")
    ratios: list[float] = field(default_factory=list)  # after each round


def _error_ratio(params, vocab, texts, labels, retained_fraction) -> tuple[float, PCAProjector]:
    embeddings = embed_corpus_mean(params, vocab, texts)
    proj = fit_pca(embeddings, retained_fraction)
    errors = reconstruction_errors(proj, embeddings)
    y = np.asarray(labels)
    pos = errors[y == 1].mean()
    neg = errors[y == 0].mean() if np.any(y == 0) else float("nan")
    return float(pos / neg), proj


def tune_reconstruction(
    params: ModelParams,
    vocab: bpe.Vocab,
    labeled_corpus: Corpus,
    config: TuneConfig,
    progress: bool = False,
) -> tuple[ModelParams, PCAProjector, ReconTuneHistory]:
    """Alternate projector refits with encoder updates against the ranking loss.

    Each round fits the projector on the current mean embeddings of the
    labeled set, then runs `config.epochs` epochs of minibatch gradient
    descent on the encoder with the projector held fixed. The returned
    projector is refit on the final embeddings.
    """
    texts = [r.text for r in labeled_corpus.records]
    labels = [labeled_corpus.labels.get(r.record_id, 0) for r in labeled_corpus.records]
    if not texts:
        raise ValueError("labeled corpus is empty")
    if not any(labels):
        raise ValueError("reconstruction tuning needs at least one positive label")

    history = ReconTuneHistory()
    history.ratio_before, proj = _error_ratio(params, vocab, texts, labels, config.retained_fraction)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    opt = AdamW(params.named(), learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    y = np.asarray(labels)

    for round_no in range(config.recon_rounds):
        round_losses: list[float] = []
        for _ in range(config.epochs):
            order = rng.permutation(len(texts))
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                loss = _batch_recon_loss(
                    params, vocab, [texts[i] for i in idx], y[idx], proj.components
                )
                value = float(loss.data)
                if not math.isfinite(value):
                    raise ArithmeticError(f"non-finite ranking loss in round {round_no}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                round_losses.append(value)
        ratio, proj = _error_ratio(params, vocab, texts, labels, config.retained_fraction)
        history.round_losses.append(round_losses)
        history.ratios.append(ratio)
        if progress:
            mean_loss = sum(round_losses) / max(len(round_losses), 1)
            print(f"round {round_no + 1}/{config.recon_rounds}  loss {mean_loss:.4f}  pos/neg error ratio {ratio:.3f}")
    return params, proj, history


# --------------------------------------------------------------------------
# Classification head on the frozen encoder
# --------------------------------------------------------------------------

@dataclass
class ClassifierHead:
    """Two-layer perceptron over a [CLS] embedding: hidden -> head_dim -> 2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    input_mode: str = "single"  # "single" | "multi"

    def named(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def logits(self, x: Tensor | np.ndarray) -> Tensor:
        hidden = ad.relu(ad.add(ad.matmul(ad.as_tensor(x), self.w1), self.b1))
        return ad.add(ad.matmul(hidden, self.w2), self.b2)

    def predict_proba(self, embeddings: np.ndarray) -> np.ndarray:
        """(n, 2) class probabilities for rows of precomputed embeddings."""
        with ad.no_grad():
            out = ad.softmax(self.logits(np.asarray(embeddings, dtype=self.w1.dtype.type)), axis=-1)
        return out.data


def init_head(hidden: int, head_dim: int, seed: int, dtype=np.float32) -> ClassifierHead:
    """Kaiming-normal initialization (std = sqrt(2 / fan_in))."""
    rng = np.random.Generator(np.random.PCG64(seed))
    w1 = rng.normal(0.0, math.sqrt(2.0 / hidden), size=(hidden, head_dim)).astype(dtype)
    w2 = rng.normal(0.0, math.sqrt(2.0 / head_dim), size=(head_dim, 2)).astype(dtype)
    return ClassifierHead(
        w1=Tensor(w1, requires_grad=True),
        b1=Tensor(np.zeros(head_dim, dtype=dtype), requires_grad=True),
        w2=Tensor(w2, requires_grad=True),
        b2=Tensor(np.zeros(2, dtype=dtype), requires_grad=True),
    )


def train_head(
    embeddings: np.ndarray,
    labels: np.ndarray,
    config: TuneConfig,
    progress: bool = False,
) -> tuple[ClassifierHead, list[float]]:
    """Train a head on precomputed embeddings with minibatch NLL."""
    x = np.asarray(embeddings, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    classes = set(np.unique(y).tolist())
    if not classes.issuperset({0, 1}):
        raise ValueError("training labels must contain both classes")
    head_dim = config.head_dim or x.shape[1]
    head = init_head(x.shape[1], head_dim, config.seed)
    opt = AdamW(head.named(), learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            logp = ad.log_softmax(head.logits(x[idx]), axis=-1)
            loss = ad.neg(ad.tmean(ad.select_columns(logp, y[idx])))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
        losses.extend(epoch_losses)
        if progress:
            print(f"epoch {epoch + 1}/{config.epochs}  loss {np.mean(epoch_losses):.4f}")
    return head, losses


def tune_classification(
    params: ModelParams,
    vocab: bpe.Vocab,
    labeled_corpus: Corpus,
    config: TuneConfig,
    input_mode: str = "single",
    progress: bool = False,
) -> tuple[ClassifierHead, list[float]]:
    """Probe the frozen encoder: train a head on [CLS] embeddings.

    `input_mode="multi"` classifies each record with up to window-1 preceding
    same-user commands joined in front of it. The encoder parameters are
    never touched.
    """
    if input_mode not in ("single", "multi"):
        raise ValueError("input_mode must be 'single' or 'multi'")
    if input_mode == "multi":
        examples = build_multiline_examples(
            labeled_corpus, config.multiline_window, config.multiline_max_gap
        )
        texts = [text for text, _, _ in examples]
        labels = [lab if lab is not None else 0 for _, lab, _ in examples]
    else:
        texts = [r.text for r in labeled_corpus.records]
        labels = [labeled_corpus.labels.get(r.record_id, 0) for r in labeled_corpus.records]
    if not texts:
        raise ValueError("labeled corpus is empty")
    embeddings = embed_corpus_cls(params, vocab, texts)
    head, losses = train_head(np.asarray(embeddings), np.asarray(labels), config, progress=progress)
    head.input_mode = input_mode
    return head, losses


def score_classification(params: ModelParams, vocab: bpe.Vocab, head: ClassifierHead, text: str) -> float:
    """Probability that `text` is intrusion-related, per the tuned head."""
    emb = embed_corpus_cls(params, vocab, [text])
    return float(head.predict_proba(emb)[0, 1])


def score_classification_batch(params, vocab, head: ClassifierHead, texts: list[str]) -> np.ndarray:
    emb = embed_corpus_cls(params, vocab, texts)
    return head.predict_proba(emb)[:, 1]


# --------------------------------------------------------------------------
# Multi-line inputs
# --------------------------------------------------------------------------

def build_multiline_examples(
    corpus: Corpus,
    window: int,
    max_gap: int,
) -> list[tuple[str, int | None, str]]:
    """Join each record with up to window-1 preceding same-user commands.

    History stops at the first predecessor whose gap to its successor exceeds
    `max_gap` seconds. Texts are joined oldest-first with "; "; the anchor is
    always the final segment and donates its label. One example per record.
    """
    by_user: dict[str, list] = {}
    for i, rec in enumerate(corpus.records):
        by_user.setdefault(rec.user_id, []).append((rec.timestamp, i, rec))
    for seq in by_user.values():
        seq.sort(key=lambda t: (t[0], t[1]))

    examples: list[tuple[str, int | None, str]] = []
    order: list[int] = []
    for seq in by_user.values():
        for j, (_, orig_idx, anchor) in enumerate(seq):
            parts = [anchor.text]
            i = j - 1
            while i >= 0 and len(parts) < window:
                successor_ts = seq[i + 1][0]
                if successor_ts - seq[i][0] > max_gap:
                    break
                parts.append(seq[i][2].text)
                i -= 1
            parts.reverse()
            examples.append(
                ("; ".join(parts), corpus.labels.get(anchor.record_id), anchor.record_id)
            )
            order.append(orig_idx)
    # Emit in corpus order regardless of user grouping.
    return [examples[i] for i in np.argsort(order, kind="stable")]
