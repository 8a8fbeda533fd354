"""Acceptance criteria, one test per criterion.

Each test registers a PASS/FAIL line that the terminal summary prints via the
hook in conftest. Criteria 5-8 share the session `bench` fixture (synthetic
benchmark corpus + pretrained encoder) and stay within the stated runtime
budgets on a desktop-class CPU.
"""

import math
import time

import numpy as np
import pytest

from cmdlm import bpe
from cmdlm import corpus as C
from cmdlm import shellparse as P
from cmdlm import transformer as T
from cmdlm.evaluation import ScoredPrediction, estimate_commercial_recall, evaluate, f1, precision_at_top
from cmdlm.pca import fit_pca, reconstruction_errors
from cmdlm.retrieval import index_from_embeddings, score_corpus_knn_majority, score_corpus_knn_malicious
from cmdlm.transformer import embed_corpus_cls, embed_corpus_mean
from cmdlm.tuning import TuneConfig, recon_ranking_loss, tune_classification, tune_reconstruction

from conftest import record_acceptance


def scored_predictions(dd: C.Corpus, scores: np.ndarray) -> list[ScoredPrediction]:
    """Predictions over an already-deduplicated corpus."""
    return [
        ScoredPrediction(
            record_id=r.record_id,
            score=float(s),
            inbox_flag=bool(dd.labels[r.record_id]),
            truth=dd.truth[r.record_id],
        )
        for r, s in zip(dd.records, scores)
    ]


class TestCriterion1GradientOracle:
    def test_analytic_matches_central_differences(self):
        t0 = time.time()
        cfg = T.TransformerConfig(n_layers=1, n_heads=2, hidden=8, ffn_dim=16,
                                  max_len=16, mask_prob=0.3)
        vocab_size = 20
        params = T.init_params(cfg, vocab_size, seed=0, dtype=np.float64)
        rng = np.random.Generator(np.random.PCG64(1))
        seqs = [
            [bpe.CLS] + rng.integers(bpe.N_SPECIALS, vocab_size, size=5).tolist(),
            [bpe.CLS] + rng.integers(bpe.N_SPECIALS, vocab_size, size=7).tolist(),
        ]
        batch = T.build_masked_batch(seqs, 0.4, rng, vocab_size)
        assert batch.n_targets >= 2

        loss = T.mlm_loss(params, batch)
        loss.backward()
        analytic = {k: t.grad.copy() for k, t in params.tensors.items() if t.grad is not None}
        assert set(analytic) == set(params.tensors)

        h = 1e-4
        worst = 0.0
        for name, tensor in params.tensors.items():
            flat = tensor.data.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(T.mlm_loss(params, batch).data)
                flat[i] = orig - h
                f_minus = float(T.mlm_loss(params, batch).data)
                flat[i] = orig
                fd[i] = (f_plus - f_minus) / (2 * h)
            ga = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(fd)), 1e-6)
            rel = float(np.max(np.abs(ga - fd) / denom))
            worst = max(worst, rel)
            assert rel < 1e-3, f"{name}: max rel err {rel:.2e}"
        elapsed = time.time() - t0
        assert elapsed < 60
        record_acceptance(1, "gradient oracle", f"max rel err {worst:.1e} over all tensors in {elapsed:.0f}s")


class TestCriterion2PcaOracle:
    def test_fit_matches_bruteforce_eigendecomposition(self):
        rng = np.random.Generator(np.random.PCG64(2))
        x = rng.normal(size=(100, 16))
        proj = fit_pca(x, 0.95)

        gram = x.T @ x
        vals, vecs = np.linalg.eigh(gram)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        p = int(np.searchsorted(np.cumsum(vals) / vals.sum(), 0.95 - 1e-12) + 1)
        w_oracle = vecs[:, :p].T
        assert proj.p == p
        for row, oracle_row in zip(proj.components, w_oracle):
            assert np.allclose(row, oracle_row, atol=1e-6) or np.allclose(row, -oracle_row, atol=1e-6)

        mine = reconstruction_errors(proj, x)
        residual = x - (x @ w_oracle.T) @ w_oracle
        theirs = np.einsum("ij,ij->i", residual, residual)
        np.testing.assert_allclose(mine, theirs, rtol=1e-6)
        np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(p), atol=1e-6)
        record_acceptance(2, "PCA oracle", f"p={p}, errors within 1e-6 of Gram eigendecomposition")


class TestCriterion3RankingLossFixture:
    def test_stated_values(self):
        assert recon_ranking_loss([2.0, 1.0, 1.0], [1, 0, 0]) == pytest.approx(math.log(2), abs=1e-9)
        assert recon_ranking_loss([5.0, 0.0, 0.0], [1, 0, 0]) == 0.0
        record_acceptance(3, "ranking-loss fixture", "ln 2 and 0 reproduced exactly")


class TestCriterion4F1Reproduction:
    def test_f1_and_recall_estimate(self):
        assert f1(0.994, 1.0) == pytest.approx(0.997, abs=5e-4)
        assert estimate_commercial_recall(1.0, 100, 0.5, 300) == 100 / (0.5 * 300 + 0.5 * 100)
        assert estimate_commercial_recall(0.0, 100, 0.5, 300) == 0.0
        assert estimate_commercial_recall(1.0, 50, 1.0, 200) == 50 / 200
        record_acceptance(4, "F1 reproduction", "f1(0.994, 1.0) = 0.997 and recall estimate exact on fixtures")


class TestCriterion5MaskedSlotSanity:
    def test_download_command_in_top3(self, bench):
        assert len(bench.corpus) >= 20_000
        assert len(bench.losses) >= 2000
        top3 = T.predict_masked(
            bench.params, bench.vocab, "[MASK] http://mirror.example.com/agent.sh | bash", 3
        )
        hit = any(t.strip().startswith(("curl", "wget")) for t in top3)
        assert hit, f"top-3 fills {top3!r} contain no download command"
        record_acceptance(5, "masked-slot sanity", f"top-3 fills {top3!r}")


class TestCriterion6EndToEndBenchmark:
    def test_classification_tuning_metrics(self, bench):
        t0 = time.time()
        config = TuneConfig(learning_rate=5e-5, epochs=5, batch_size=32, seed=0)
        head, _ = tune_classification(bench.params, bench.vocab, bench.corpus, config,
                                      input_mode="single")
        dd = C.deduplicate(bench.corpus)
        emb = embed_corpus_cls(bench.params, bench.vocab, dd.texts())
        scores = head.predict_proba(emb)[:, 1]
        report = evaluate(scored_predictions(dd, scores), v_list=[50, 100], recall_target=1.0)
        elapsed = time.time() - t0
        assert report.inbox_recall_achieved == 1.0
        assert report.overall_precision >= 0.95
        assert report.precision_at[50] >= 0.90
        assert elapsed < 30 * 60
        record_acceptance(6, "end-to-end benchmark",
            f"recall=1.0, overall precision {report.overall_precision:.3f}, "
            f"top-50 precision {report.precision_at[50]:.3f} in {elapsed:.0f}s",
        )


class TestCriterion7ReconstructionSeparation:
    def test_ratio_strictly_increases_over_five_rounds(self, bench):
        labeled = C.apply_supervision(C.generate_synthetic_corpus(11, 1200, 80, 80, 0))
        config = TuneConfig(learning_rate=5e-5, epochs=5, batch_size=32,
                            recon_rounds=5, retained_fraction=0.95, seed=0)
        params = bench.params.copy()
        _, _, history = tune_reconstruction(params, bench.vocab, labeled, config)
        assert len(history.ratios) == 5
        assert history.ratios[-1] > history.ratio_before
        record_acceptance(7, "reconstruction separation",
            f"pos/neg error ratio {history.ratio_before:.2f} -> {history.ratios[-1]:.2f}",
        )


class TestCriterion8RetrievalNoiseRobustness:
    def test_malicious_only_beats_majority_vote(self, bench):
        train_emb = embed_corpus_mean(bench.params, bench.vocab, bench.corpus.texts())
        labels = [bench.corpus.labels[r.record_id] for r in bench.corpus.records]
        index = index_from_embeddings(
            train_emb, [r.record_id for r in bench.corpus.records], labels
        )
        dd = C.deduplicate(bench.corpus)
        test_emb = embed_corpus_mean(bench.params, bench.vocab, dd.texts())
        malicious_scores = score_corpus_knn_malicious(index, test_emb, 1)
        majority_scores, _ = score_corpus_knn_majority(index, test_emb, 1)

        def p50(scores):
            return precision_at_top(scored_predictions(dd, scores), 50)[0]

        p_malicious = p50(malicious_scores)
        p_majority = p50(majority_scores)
        assert p_malicious > p_majority
        record_acceptance(8, "retrieval noise-robustness",
            f"top-50 precision {p_malicious:.3f} (malicious-only) vs {p_majority:.3f} (majority vote)",
        )


class TestCriterion9PreprocessConformance:
    def test_invalid_operator_typo_filter_and_fuzz(self):
        with pytest.raises(P.ParseError):
            P.parse_command_line("/a/b/c -> /d/e/f ->")

        records = [C.CommandRecord(f"d{i}", "u", i, "docker ps") for i in range(50)]
        records += [C.CommandRecord("t0", "u", 100, "dcoker ps"), C.CommandRecord("t1", "u", 101, "dcoker images")]
        corp = C.Corpus(records=records)
        allow = P.build_allowlist(P.build_frequency_table(corp), min_count=10)
        kept, removed = P.filter_valid(corp, allow)
        kept_texts = {r.text for r in kept.records}
        assert "docker ps" in kept_texts
        assert not any(t.startswith("dcoker") for t in kept_texts)
        assert dict(removed) == {"t0": P.REASON_NAME_NOT_ALLOWED, "t1": P.REASON_NAME_NOT_ALLOWED}

        rng = np.random.Generator(np.random.PCG64(99))
        n = 100_000
        outcomes = {"ok": 0, "err": 0}
        for _ in range(n):
            length = int(rng.integers(0, 40))
            text = rng.integers(0, 256, size=length).tobytes().decode("latin-1")
            try:
                P.parse_command_line(text)
                outcomes["ok"] += 1
            except P.ParseError:
                outcomes["err"] += 1
        assert outcomes["ok"] + outcomes["err"] == n
        record_acceptance(9, "preprocess conformance",
            f"'->' rejected, typo filtered, fuzz {n} strings: {outcomes['ok']} parsed / {outcomes['err']} rejected, 0 crashes",
        )


class TestBenchSpotChecks:
    """Desk-scale directional checks that ride on the benchmark fixture."""

    def test_port_scans_rank_above_benign_median_unsupervised(self, bench):
        emb = embed_corpus_mean(bench.params, bench.vocab, bench.corpus.texts())
        proj = fit_pca(emb, 0.95)
        errors = reconstruction_errors(proj, emb)
        port_scans, benign = [], []
        for rec, err in zip(bench.corpus.records, errors):
            if rec.text.startswith("masscan "):
                port_scans.append(err)
            elif bench.corpus.truth.get(rec.record_id) == "benign":
                benign.append(err)
        assert port_scans
        assert np.median(port_scans) > np.median(benign)


class TestCriterion10Determinism:
    def test_cli_pipeline_byte_identical(self, tmp_path):
        from cmdlm.cli import main

        def run_pipeline(tag: str) -> dict[str, bytes]:
            d = tmp_path / tag
            d.mkdir()
            corpus = d / "corpus.jsonl"
            kept = d / "kept.jsonl"
            vocab = d / "vocab.txt"
            model = d / "model.ckpt"
            tuned = d / "tuned.ckpt"
            scores = d / "scores.jsonl"
            report = d / "report.json"
            steps = [
                ["gen-corpus", "--output", corpus, "--seed", "13", "--benign", "250",
                 "--inbox", "20", "--oob", "20", "--invalid", "4", "--deterministic"],
                ["preprocess", "--input", corpus, "--output", kept, "--deterministic"],
                ["train-tokenizer", "--input", kept, "--output", vocab,
                 "--vocab-size", "350", "--deterministic"],
                ["pretrain", "--input", kept, "--vocab", vocab, "--output", model,
                 "--layers", "1", "--heads", "2", "--hidden", "16", "--ffn-dim", "32",
                 "--max-len", "48", "--steps", "60", "--batch-size", "8", "--seed", "0",
                 "--quiet", "--deterministic"],
                ["tune", "--method", "classif", "--input", kept, "--vocab", vocab,
                 "--checkpoint", model, "--output", tuned, "--epochs", "2", "--seed", "0",
                 "--quiet", "--deterministic"],
                ["score", "--method", "classif", "--input", kept, "--vocab", vocab,
                 "--checkpoint", tuned, "--output", scores, "--deterministic"],
                ["evaluate", "--scores", scores, "--corpus", kept, "--output", report,
                 "--u", "1.0", "--top", "10,20", "--deterministic"],
            ]
            for argv in steps:
                assert main([str(a) for a in argv]) == 0
            return {
                "checkpoint": model.read_bytes(),
                "tuned": tuned.read_bytes(),
                "scores": scores.read_bytes(),
                "report": report.read_bytes(),
            }

        first = run_pipeline("run1")
        second = run_pipeline("run2")
        for name in first:
            assert first[name] == second[name], f"{name} differs between runs"
        record_acceptance(10, "determinism", "checkpoints, scores, and reports byte-identical across two runs")
