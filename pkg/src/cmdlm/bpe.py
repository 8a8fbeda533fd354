"""Byte-level byte-pair-encoding tokenizer.

The base alphabet is all 256 byte values, so any command line tokenizes
without an out-of-vocabulary path; whitespace stays in the byte stream, since
a flag or path's exact spelling is signal here. Four special ids ([PAD],
[UNK], [CLS], [MASK]) are reserved below the byte alphabet.

Training iteratively merges the most frequent adjacent token pair. Ties are
broken lexicographically on the pair's byte strings (then on ids), which
makes training a pure function of the input texts. Counting is incremental:
each merge touches only the sequences containing the pair, so training stays
fast on tens of thousands of lines.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import Counter
from dataclasses import dataclass, field

PAD, UNK, CLS, MASK = 0, 1, 2, 3
SPECIAL_TOKENS = {"[PAD]": PAD, "[UNK]": UNK, "[CLS]": CLS, "[MASK]": MASK}
N_SPECIALS = 4
N_BASE = 256  # byte alphabet, ids N_SPECIALS .. N_SPECIALS+255

TokenSequence = list[int]

_FORMAT_HEADER = "cmdlm-vocab v1"


@dataclass
class Vocab:
    """Learned merges plus the fixed byte alphabet and special ids."""

    merges: list[tuple[int, int]]
    token_bytes: list[bytes] = field(repr=False)
    ranks: dict[tuple[int, int], int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.token_bytes)

    def token_string(self, token_id: int) -> str:
        """Printable form of one token (specials by name)."""
        for name, sid in SPECIAL_TOKENS.items():
            if token_id == sid:
                return name
        return self.token_bytes[token_id].decode("utf-8", errors="replace")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a, b in self.merges:
            h.update(f"{a},{b};".encode())
        return h.hexdigest()


def _base_token_bytes() -> list[bytes]:
    toks = [b""] * N_SPECIALS
    toks.extend(bytes([i]) for i in range(256))
    return toks


def train_bpe(texts: list[str], vocab_size: int) -> Vocab:
    """Learn a BPE vocabulary of up to `vocab_size` tokens.

    `vocab_size` counts specials and the 256 base bytes; the merge budget is
    what remains. A corpus can exhaust its mergeable pairs early, in which
    case the learned vocabulary is smaller than requested.
    """
    if vocab_size < N_SPECIALS + N_BASE:
        raise ValueError(
            f"vocab_size must be >= {N_SPECIALS + N_BASE} (specials + byte alphabet)"
        )
    n_merges = vocab_size - N_SPECIALS - N_BASE
    token_bytes = _base_token_bytes()

    # Identical texts are folded into weights; insertion order is preserved,
    # so training stays deterministic for a given input order.
    text_counts: Counter[str] = Counter(texts)
    seqs: list[list[int]] = []
    weights: list[int] = []
    for text, cnt in text_counts.items():
        seqs.append([N_SPECIALS + b for b in text.encode("utf-8")])
        weights.append(cnt)

    pair_count: dict[tuple[int, int], int] = {}
    pair_seqs: dict[tuple[int, int], set[int]] = {}
    for si, seq in enumerate(seqs):
        w = weights[si]
        for pair in zip(seq, seq[1:]):
            pair_count[pair] = pair_count.get(pair, 0) + w
            pair_seqs.setdefault(pair, set()).add(si)

    heap: list[tuple[int, bytes, bytes, int, int]] = [
        (-c, token_bytes[a], token_bytes[b], a, b) for (a, b), c in pair_count.items()
    ]
    heapq.heapify(heap)

    merges: list[tuple[int, int]] = []
    ranks: dict[tuple[int, int], int] = {}

    def _replace_in_seq(si: int, a: int, b: int, nid: int, delta: dict) -> bool:
        seq = seqs[si]
        w = weights[si]
        out: list[int] = []
        i = 0
        changed = False
        L = len(seq)
        while i < L:
            if i + 1 < L and seq[i] == a and seq[i + 1] == b:
                prev = out[-1] if out else None
                nxt = seq[i + 2] if i + 2 < L else None
                delta[(a, b)] = delta.get((a, b), 0) - w
                if prev is not None:
                    delta[(prev, a)] = delta.get((prev, a), 0) - w
                    delta[(prev, nid)] = delta.get((prev, nid), 0) + w
                    pair_seqs.setdefault((prev, nid), set()).add(si)
                if nxt is not None:
                    delta[(b, nxt)] = delta.get((b, nxt), 0) - w
                    delta[(nid, nxt)] = delta.get((nid, nxt), 0) + w
                    pair_seqs.setdefault((nid, nxt), set()).add(si)
                out.append(nid)
                i += 2
                changed = True
            else:
                out.append(seq[i])
                i += 1
        if changed:
            seqs[si] = out
        return changed

    while len(merges) < n_merges and heap:
        neg_c, _, _, a, b = heapq.heappop(heap)
        pair = (a, b)
        current = pair_count.get(pair, 0)
        if current <= 0:
            continue
        if current != -neg_c:
            # Stale heap entry; requeue with the up-to-date count.
            heapq.heappush(heap, (-current, token_bytes[a], token_bytes[b], a, b))
            continue

        nid = len(token_bytes)
        token_bytes.append(token_bytes[a] + token_bytes[b])
        ranks[pair] = len(merges)
        merges.append(pair)

        delta: dict[tuple[int, int], int] = {}
        for si in sorted(pair_seqs.get(pair, ())):
            _replace_in_seq(si, a, b, nid, delta)
        pair_seqs.pop(pair, None)

        for p, d in delta.items():
            if d == 0:
                continue
            c = pair_count.get(p, 0) + d
            if c <= 0:
                pair_count.pop(p, None)
            else:
                pair_count[p] = c
                heapq.heappush(heap, (-c, token_bytes[p[0]], token_bytes[p[1]], p[0], p[1]))
        pair_count.pop(pair, None)

    return Vocab(merges=merges, token_bytes=token_bytes, ranks=ranks)


def _apply_merges(ids: list[int], ranks: dict[tuple[int, int], int]) -> list[int]:
    # Greedy: repeatedly apply the eligible merge with the best learned rank.
    while len(ids) >= 2:
        best_rank = None
        best_pair = None
        for pair in zip(ids, ids[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
                best_pair = pair
        if best_pair is None:
            break
        nid = N_SPECIALS + N_BASE + best_rank
        a, b = best_pair
        out = []
        i = 0
        while i < len(ids):
            if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
                out.append(nid)
                i += 2
            else:
                out.append(ids[i])
                i += 1
        ids = out
    return ids


def encode(vocab: Vocab, text: str, max_len: int) -> TokenSequence:
    """Tokenize `text` to ids, prepending [CLS] and truncating to `max_len`."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [N_SPECIALS + b for b in text.encode("utf-8")]
    ids = _apply_merges(ids, vocab.ranks)
    seq = [CLS] + ids
    return seq[:max_len]


def decode(vocab: Vocab, ids: TokenSequence) -> str:
    """Inverse of encode up to truncation; special tokens are dropped."""
    chunks = []
    for i in ids:
        if not 0 <= i < vocab.size:
            raise ValueError(f"token id {i} out of range for vocab of size {vocab.size}")
        if i < N_SPECIALS:
            continue
        chunks.append(vocab.token_bytes[i])
    return b"".join(chunks).decode("utf-8", errors="replace")


def save_vocab(vocab: Vocab, path) -> None:
    """Write the versioned vocab file: header, specials, then ordered merges."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_FORMAT_HEADER}\n")
        fh.write(f"size={vocab.size} merges={len(vocab.merges)} base={N_BASE}\n")
        fh.write("specials=" + ",".join(f"{n}:{i}" for n, i in SPECIAL_TOKENS.items()) + "\n")
        for a, b in vocab.merges:
            fh.write(f"{a} {b}\n")


def load_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != _FORMAT_HEADER:
            raise ValueError(f"{path}: unrecognized vocab file header {header!r}")
        meta = dict(kv.split("=") for kv in fh.readline().split())
        fh.readline()  # specials line is fixed by the format
        token_bytes = _base_token_bytes()
        merges = []
        ranks = {}
        for line in fh:
            a_s, b_s = line.split()
            a, b = int(a_s), int(b_s)
            if not (0 <= a < len(token_bytes) and 0 <= b < len(token_bytes)):
                raise ValueError(f"{path}: merge ({a},{b}) references unknown tokens")
            ranks[(a, b)] = len(merges)
            merges.append((a, b))
            token_bytes.append(token_bytes[a] + token_bytes[b])
        vocab = Vocab(merges=merges, token_bytes=token_bytes, ranks=ranks)
        if vocab.size != int(meta["size"]):
            raise ValueError(f"{path}: vocab size mismatch with header")
        return vocab
