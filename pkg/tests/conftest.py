"""Shared fixtures.

`bench` is the expensive session fixture behind the end-to-end acceptance
tests: one synthetic benchmark corpus (20k benign + 200 in-box + 200
out-of-box + 50 junk lines), preprocessed, tokenized, and pretrained for
5000 masked-token steps. Everything downstream (masked-slot sanity,
classification tuning, retrieval comparison) reuses it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from cmdlm import bpe
from cmdlm import corpus as corpus_mod
from cmdlm import shellparse
from cmdlm.transformer import ModelParams, PretrainOptions, TransformerConfig, init_params, pretrain

BENCH_SEED = 7
BENCH_COUNTS = dict(n_benign=20_000, n_inbox=200, n_oob=200, n_invalid=50)
BENCH_VOCAB_SIZE = 600
BENCH_CONFIG = TransformerConfig(
    n_layers=3, n_heads=4, hidden=96, ffn_dim=384, max_len=64, mask_prob=0.15
)
BENCH_STEPS = 5000


@dataclass
class BenchPipeline:
    corpus: corpus_mod.Corpus        # preprocessed, with noisy labels and truth
    vocab: bpe.Vocab
    params: ModelParams
    losses: list[float]


def build_small_model(vocab: bpe.Vocab, seed: int = 0) -> ModelParams:
    cfg = TransformerConfig(n_layers=1, n_heads=2, hidden=16, ffn_dim=32, max_len=32, mask_prob=0.15)
    return init_params(cfg, vocab.size, seed=seed)


@pytest.fixture(scope="session")
def bench() -> BenchPipeline:
    corp = corpus_mod.generate_synthetic_corpus(BENCH_SEED, **BENCH_COUNTS)
    corp = corpus_mod.apply_supervision(corp)
    table = shellparse.build_frequency_table(corp)
    allow = shellparse.build_allowlist(table, shellparse.default_min_count(len(corp)))
    kept, _ = shellparse.filter_valid(corp, allow)
    vocab = bpe.train_bpe(kept.texts(), BENCH_VOCAB_SIZE)
    params = init_params(BENCH_CONFIG, vocab.size, seed=0)
    params, losses = pretrain(
        kept.texts(), vocab, params,
        PretrainOptions(steps=BENCH_STEPS, batch_size=32, seed=0),
    )
    return BenchPipeline(corpus=kept, vocab=vocab, params=params, losses=losses)


@pytest.fixture()
def tiny_vocab() -> bpe.Vocab:
    texts = ["docker ps", "ls -la /tmp", "echo hello", "nc -lvnp 4444"] * 4
    return bpe.train_bpe(texts, 300)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(1234))


# --------------------------------------------------------------------------
# Acceptance reporting: one PASS/FAIL line per criterion in the summary
# --------------------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}  # num -> (label, status, detail)


def record_acceptance(num: int, label: str, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[num] = (label, "PASS", detail)


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    import re

    match = re.search(r"TestCriterion(\d+)([A-Za-z]*)", report.nodeid)
    if not match:
        return
    num = int(match.group(1))
    if report.outcome != "passed" or num not in ACCEPTANCE_RESULTS:
        label = ACCEPTANCE_RESULTS.get(num, (match.group(2), "", ""))[0]
        status = "PASS" if report.outcome == "passed" else report.outcome.upper()
        ACCEPTANCE_RESULTS[num] = (label, status, "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        label, status, detail = ACCEPTANCE_RESULTS[num]
        line = f"criterion {num} ({label}): {status}"
        if detail:
            line += f" - {detail}"
        terminalreporter.write_line(line)
