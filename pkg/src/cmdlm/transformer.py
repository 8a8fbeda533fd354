"""Transformer encoder, masked-token objective, pretraining, and embeddings.

A BERT-style bidirectional encoder built on the in-package autodiff core:
learned token + position embeddings, pre-layer-norm blocks with multi-head
self-attention and a GELU feed-forward, and a linear masked-token prediction
head. Training randomly replaces tokens (80% with [MASK], 10% with a random
token, 10% unchanged) and minimizes mean cross-entropy of recovering the
originals from the surrounding context.

Commands are short and highly structured, so even a small configuration
learns their phrasing well enough to rank plausible fills for a masked slot
and to give downstream detectors a usable embedding space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bpe
from .autodiff import Tensor
from .optim import AdamW

MASK_MARKER = "[MASK]"


class TrainingDiverged(Exception):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 4
    n_heads: int = 4
    hidden: int = 128
    ffn_dim: int = 512
    max_len: int = 128
    mask_prob: float = 0.15

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")
        if self.ffn_dim < 1:
            raise ValueError("ffn_dim must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must lie in (0, 1)")


@dataclass
class ModelParams:
    config: TransformerConfig
    vocab_size: int
    tensors: dict[str, Tensor]

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            vocab_size=self.vocab_size,
            tensors={k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
        )

    def state_hash(self) -> int:
        # Cheap fingerprint for frozen-backbone assertions.
        acc = 0
        for name in sorted(self.tensors):
            acc ^= hash((name, self.tensors[name].data.tobytes()))
        return acc


def init_params(
    config: TransformerConfig,
    vocab_size: int,
    seed: int,
    dtype=np.float32,
) -> ModelParams:
    """Seeded normal(0, 0.02) init; layer-norm gains at 1, biases at 0."""
    rng = np.random.Generator(np.random.PCG64(seed))
    h, f = config.hidden, config.ffn_dim

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    tensors: dict[str, Tensor] = {
        "tok_emb": normal(vocab_size, h),
        "pos_emb": normal(config.max_len, h),
        "ln_f.g": ones(h),
        "ln_f.b": zeros(h),
        "mlm.w": normal(h, vocab_size),
        "mlm.b": zeros(vocab_size),
    }
    for i in range(config.n_layers):
        p = f"l{i}."
        tensors[p + "ln1.g"] = ones(h)
        tensors[p + "ln1.b"] = zeros(h)
        tensors[p + "wq"] = normal(h, h)
        tensors[p + "bq"] = zeros(h)
        tensors[p + "wk"] = normal(h, h)
        tensors[p + "bk"] = zeros(h)
        tensors[p + "wv"] = normal(h, h)
        tensors[p + "bv"] = zeros(h)
        tensors[p + "wo"] = normal(h, h)
        tensors[p + "bo"] = zeros(h)
        tensors[p + "ln2.g"] = ones(h)
        tensors[p + "ln2.b"] = zeros(h)
        tensors[p + "fc1.w"] = normal(h, f)
        tensors[p + "fc1.b"] = zeros(f)
        tensors[p + "fc2.w"] = normal(f, h)
        tensors[p + "fc2.b"] = zeros(h)
    return ModelParams(config=config, vocab_size=vocab_size, tensors=tensors)


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
    inv = ad.power(ad.add(var, eps), -0.5)
    return ad.add(ad.mul(ad.mul(centered, inv), gain), bias)


def forward_batch(
    params: ModelParams,
    ids: np.ndarray,
    attn_mask: np.ndarray | None = None,
    attn_probs_out: list | None = None,
) -> Tensor:
    """Encode a padded (B, T) id matrix into (B, T, hidden) states.

    `attn_mask` is 1 for real positions, 0 for padding; padded keys are
    excluded from every attention row. Pass `attn_probs_out` to collect the
    per-layer attention probability arrays (diagnostics only).
    """
    cfg = params.config
    t = params.tensors
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be a (batch, length) matrix")
    B, T = ids.shape
    if T > cfg.max_len:
        raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if np.any(ids < 0) or np.any(ids >= params.vocab_size):
        raise ValueError("token id out of range")

    dtype = t["tok_emb"].dtype
    if attn_mask is None:
        attn_mask = np.ones((B, T), dtype=dtype)
    attn_mask = np.asarray(attn_mask, dtype=dtype)
    # Additive bias: real keys contribute 0, padded keys a large negative.
    bias = ((1.0 - attn_mask) * np.asarray(-1e9, dtype=dtype)).reshape(B, 1, 1, T)

    n_heads = cfg.n_heads
    head_dim = cfg.hidden // n_heads
    scale = np.asarray(1.0 / math.sqrt(head_dim), dtype=dtype)

    x = ad.add(ad.embedding(t["tok_emb"], ids), ad.take_rows(t["pos_emb"], np.arange(T)))
    for i in range(cfg.n_layers):
        p = f"l{i}."
        h = _layer_norm(x, t[p + "ln1.g"], t[p + "ln1.b"])
        q = ad.add(ad.matmul(h, t[p + "wq"]), t[p + "bq"])
        k = ad.add(ad.matmul(h, t[p + "wk"]), t[p + "bk"])
        v = ad.add(ad.matmul(h, t[p + "wv"]), t[p + "bv"])
        q = ad.transpose(ad.reshape(q, (B, T, n_heads, head_dim)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (B, T, n_heads, head_dim)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (B, T, n_heads, head_dim)), (0, 2, 1, 3))
        scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale), bias)
        probs = ad.softmax(scores, axis=-1)
        if attn_probs_out is not None:
            attn_probs_out.append(probs.data)
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, cfg.hidden))
        attn = ad.add(ad.matmul(ctx, t[p + "wo"]), t[p + "bo"])
        x = ad.add(x, attn)

        h2 = _layer_norm(x, t[p + "ln2.g"], t[p + "ln2.b"])
        inner = ad.gelu(ad.add(ad.matmul(h2, t[p + "fc1.w"]), t[p + "fc1.b"]))
        ffn = ad.add(ad.matmul(inner, t[p + "fc2.w"]), t[p + "fc2.b"])
        x = ad.add(x, ffn)
    return _layer_norm(x, t["ln_f.g"], t["ln_f.b"])


def forward(params: ModelParams, ids: bpe.TokenSequence) -> np.ndarray:
    """Token embeddings for one sequence: (len(ids), hidden), position 0 = [CLS]."""
    with ad.no_grad():
        states = forward_batch(params, np.asarray(ids, dtype=np.int64)[None, :])
    return states.data[0]


# --------------------------------------------------------------------------
# Masking and the masked-token objective
# --------------------------------------------------------------------------

@dataclass
class MaskedBatch:
    input_ids: np.ndarray       # (B, T) after replacement and padding
    attn_mask: np.ndarray       # (B, T), 1 = real token
    target_rows: np.ndarray     # flattened (b * T + t) indices of targets
    target_ids: np.ndarray      # original token ids at the targets
    seq_len: int

    @property
    def n_targets(self) -> int:
        return int(self.target_ids.size)


def mask_sequence(
    seq: bpe.TokenSequence,
    mask_prob: float,
    rng: np.random.Generator,
    vocab_size: int,
) -> tuple[list[int], list[int], list[int]]:
    """Select non-[CLS] positions independently with `mask_prob`.

    Of the selected positions, 80% become [MASK], 10% a random non-special
    token, 10% stay unchanged; all selected positions are targets. Returns
    (replaced_ids, target_positions, original_ids).
    """
    out = list(seq)
    positions: list[int] = []
    originals: list[int] = []
    draws = rng.random(len(seq))
    for pos in range(1, len(seq)):  # position 0 is [CLS], never a target
        if draws[pos] >= mask_prob:
            continue
        positions.append(pos)
        originals.append(seq[pos])
        action = rng.random()
        if action < 0.8:
            out[pos] = bpe.MASK
        elif action < 0.9:
            out[pos] = int(rng.integers(bpe.N_SPECIALS, vocab_size))
        # else: keep the original token
    return out, positions, originals


def build_masked_batch(
    seqs: list[bpe.TokenSequence],
    mask_prob: float,
    rng: np.random.Generator,
    vocab_size: int,
) -> MaskedBatch:
    """Mask each sequence and pad the batch to its longest member."""
    masked = [mask_sequence(s, mask_prob, rng, vocab_size) for s in seqs]
    T = max(len(s) for s in seqs)
    B = len(seqs)
    input_ids = np.full((B, T), bpe.PAD, dtype=np.int64)
    attn_mask = np.zeros((B, T), dtype=np.float32)
    rows: list[int] = []
    targets: list[int] = []
    for b, (ids, positions, originals) in enumerate(masked):
        input_ids[b, : len(ids)] = ids
        attn_mask[b, : len(ids)] = 1.0
        rows.extend(b * T + p for p in positions)
        targets.extend(originals)
    if not rows:
        # Vanishingly rare for real batches: force one target so the loss
        # stays defined, picking the first sequence with a non-[CLS] token.
        for b, s in enumerate(seqs):
            if len(s) >= 2:
                rows = [b * T + 1]
                targets = [int(input_ids[b, 1])]
                input_ids[b, 1] = bpe.MASK
                break
        else:
            raise ValueError("cannot mask a batch of [CLS]-only sequences")
    return MaskedBatch(
        input_ids=input_ids,
        attn_mask=attn_mask,
        target_rows=np.asarray(rows, dtype=np.int64),
        target_ids=np.asarray(targets, dtype=np.int64),
        seq_len=T,
    )


def mlm_loss(params: ModelParams, batch: MaskedBatch) -> Tensor:
    """Mean cross-entropy of the original tokens at the masked positions."""
    if batch.n_targets == 0:
        raise ValueError("masked batch has no target positions")
    states = forward_batch(params, batch.input_ids, batch.attn_mask)
    B, T = batch.input_ids.shape
    flat = ad.reshape(states, (B * T, params.config.hidden))
    picked = ad.take_rows(flat, batch.target_rows)
    logits = ad.add(ad.matmul(picked, params.tensors["mlm.w"]), params.tensors["mlm.b"])
    logp = ad.log_softmax(logits, axis=-1)
    nll = ad.neg(ad.tmean(ad.select_columns(logp, batch.target_ids)))
    return nll


# --------------------------------------------------------------------------
# Pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainOptions:
    learning_rate: float = 1e-4
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    weight_decay: float = 0.01
    log_every: int = 100


def pretrain(
    texts: list[str],
    vocab: bpe.Vocab,
    params: ModelParams,
    options: PretrainOptions,
    progress: bool = False,
) -> tuple[ModelParams, list[float]]:
    """Train `params` in place with the masked-token objective.

    Deterministic for a fixed seed (single-threaded). Returns the params and
    the per-step loss curve. Raises `TrainingDiverged` on a non-finite loss.
    """
    if not texts:
        raise ValueError("pretraining corpus is empty")
    cfg = params.config
    seqs = [bpe.encode(vocab, t, cfg.max_len) for t in texts]
    rng = np.random.Generator(np.random.PCG64(options.seed))
    opt = AdamW(
        params.named(),
        learning_rate=options.learning_rate,
        weight_decay=options.weight_decay,
    )
    losses: list[float] = []
    for step in range(options.steps):
        idx = rng.integers(0, len(seqs), size=options.batch_size)
        batch = build_masked_batch([seqs[i] for i in idx], cfg.mask_prob, rng, params.vocab_size)
        loss = mlm_loss(params, batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
        if progress and options.log_every and (step + 1) % options.log_every == 0:
            tail = losses[-options.log_every:]
            print(f"step {step + 1}/{options.steps}  loss {sum(tail) / len(tail):.4f}")
    return params, losses


# --------------------------------------------------------------------------
# Embeddings
# --------------------------------------------------------------------------

def embed_mean(params: ModelParams, vocab: bpe.Vocab, text: str) -> np.ndarray:
    """Average of all output token embeddings (the [CLS] slot included)."""
    ids = bpe.encode(vocab, text, params.config.max_len)
    return forward(params, ids).mean(axis=0)


def embed_cls(params: ModelParams, vocab: bpe.Vocab, text: str) -> np.ndarray:
    """The position-0 ([CLS]) output embedding."""
    ids = bpe.encode(vocab, text, params.config.max_len)
    return forward(params, ids)[0]


def _embed_corpus(params, vocab, texts, batch_size, pooling) -> np.ndarray:
    cfg = params.config
    out = np.empty((len(texts), cfg.hidden), dtype=np.float32)
    for start in range(0, len(texts), batch_size):
        chunk = texts[start : start + batch_size]
        seqs = [bpe.encode(vocab, t, cfg.max_len) for t in chunk]
        T = max(len(s) for s in seqs)
        ids = np.full((len(seqs), T), bpe.PAD, dtype=np.int64)
        mask = np.zeros((len(seqs), T), dtype=np.float32)
        for b, s in enumerate(seqs):
            ids[b, : len(s)] = s
            mask[b, : len(s)] = 1.0
        with ad.no_grad():
            states = forward_batch(params, ids, mask).data
        if pooling == "mean":
            sums = (states * mask[:, :, None]).sum(axis=1)
            out[start : start + len(seqs)] = sums / mask.sum(axis=1)[:, None]
        else:
            out[start : start + len(seqs)] = states[:, 0, :]
    return out


def embed_corpus_mean(params, vocab, texts: list[str], batch_size: int = 64) -> np.ndarray:
    """Mean-pooled embeddings for many texts, padding-aware. (N, hidden)."""
    return _embed_corpus(params, vocab, texts, batch_size, "mean")


def embed_corpus_cls(params, vocab, texts: list[str], batch_size: int = 64) -> np.ndarray:
    """[CLS] embeddings for many texts. (N, hidden)."""
    return _embed_corpus(params, vocab, texts, batch_size, "cls")


# --------------------------------------------------------------------------
# Masked-slot prediction
# --------------------------------------------------------------------------

def predict_masked(
    params: ModelParams,
    vocab: bpe.Vocab,
    text: str,
    top_k: int,
) -> list[str]:
    """Rank vocabulary fills for the single [MASK] marker in `text`.

    The marker absorbs one adjacent space so the visible context matches how
    space-carrying BPE tokens looked during training. Returns the top_k token
    strings by predicted probability.
    """
    if text.count(MASK_MARKER) != 1:
        raise ValueError(f"text must contain exactly one {MASK_MARKER} marker")
    prefix, suffix = text.split(MASK_MARKER)
    if suffix.startswith(" "):
        suffix = suffix[1:]
    elif prefix.endswith(" "):
        prefix = prefix[:-1]
    pre_ids = bpe.encode(vocab, prefix, params.config.max_len)  # [CLS] + prefix
    suf_ids = bpe.encode(vocab, suffix, params.config.max_len)[1:]
    ids = pre_ids + [bpe.MASK] + suf_ids
    ids = ids[: params.config.max_len]
    mask_pos = len(pre_ids)
    if mask_pos >= len(ids):
        raise ValueError("mask marker falls outside the model's maximum length")

    with ad.no_grad():
        states = forward_batch(params, np.asarray(ids, dtype=np.int64)[None, :])
        vec = states.data[0, mask_pos]
        logits = vec @ params.tensors["mlm.w"].data + params.tensors["mlm.b"].data
    order = np.argsort(-logits, kind="stable")
    return [vocab.token_string(int(i)) for i in order[: int(top_k)]]
