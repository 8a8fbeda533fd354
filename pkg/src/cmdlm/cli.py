"""Pipeline driver: corpus generation through evaluation, one stage per call.

Stages read and write only the files named on their command line, so each is
re-runnable and reproducible: identical inputs, seed, and --deterministic
mode give byte-identical outputs. A flat INI config file can pre-fill any
option; explicit flags win.

Heavy imports happen inside the handlers so that --deterministic can pin the
numeric thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys


class CliError(Exception):
    pass


def _pin_threads() -> None:
    # Must run before numpy is imported for the BLAS pools to honor it.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = "1"


def _input_sha(text: str) -> str:
    from .corpus import normalize_text

    return hashlib.sha256(normalize_text(text).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Config file support
# --------------------------------------------------------------------------

class _Config:
    """INI-backed defaults; missing file or key just falls through."""

    def __init__(self, path: str | None):
        self.parser = configparser.ConfigParser()
        if path:
            if not os.path.exists(path):
                raise CliError(f"config file not found: {path}")
            self.parser.read(path)

    def fill(self, args: argparse.Namespace, section: str, casts: dict[str, type]) -> None:
        if not self.parser.has_section(section):
            return
        for key, cast in casts.items():
            if getattr(args, key, None) is None and self.parser.has_option(section, key):
                raw = self.parser.get(section, key)
                setattr(args, key, cast(raw))


def _default(args, name, value):
    if getattr(args, name, None) is None:
        setattr(args, name, value)


# --------------------------------------------------------------------------
# Stage handlers
# --------------------------------------------------------------------------

def _cmd_gen_corpus(args) -> int:
    from . import corpus as C

    cfg = _Config(args.config)
    cfg.fill(args, "corpus", {"seed": int, "benign": int, "inbox": int, "oob": int, "invalid": int})
    for name, value in [("seed", 0), ("benign", 1000), ("inbox", 20), ("oob", 20), ("invalid", 5)]:
        _default(args, name, value)
    corp = C.generate_synthetic_corpus(args.seed, args.benign, args.inbox, args.oob, args.invalid)
    if not args.no_labels:
        corp = C.apply_supervision(corp)
    C.save_records(corp, args.output)
    print(f"wrote {len(corp)} records to {args.output}")
    return 0


def _cmd_preprocess(args) -> int:
    from . import corpus as C
    from . import shellparse as P

    corp = C.load_records(args.input)
    if args.allowlist:
        allowlist = P.load_allowlist(args.allowlist)
    else:
        table = P.build_frequency_table(corp)
        min_count = args.min_count if args.min_count is not None else P.default_min_count(len(corp))
        try:
            allowlist = P.build_allowlist(table, min_count)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
    kept, removed = P.filter_valid(corp, allowlist)
    C.save_records(kept, args.output)
    if args.removed:
        with open(args.removed, "w", encoding="utf-8") as fh:
            for rid, reason in removed:
                fh.write(f"{rid}\t{reason}\n")
    print(f"kept {len(kept)} records, removed {len(removed)} ({args.output})")
    return 0


def _cmd_train_tokenizer(args) -> int:
    from . import bpe
    from . import corpus as C

    cfg = _Config(args.config)
    cfg.fill(args, "tokenizer", {"vocab_size": int})
    _default(args, "vocab_size", 2000)
    corp = C.load_records(args.input)
    vocab = bpe.train_bpe(corp.texts(), args.vocab_size)
    bpe.save_vocab(vocab, args.output)
    print(f"trained vocab of {vocab.size} tokens ({len(vocab.merges)} merges) -> {args.output}")
    return 0


def _model_config_from(args):
    from .transformer import TransformerConfig

    return TransformerConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        hidden=args.hidden,
        ffn_dim=args.ffn_dim,
        max_len=args.max_len,
        mask_prob=args.mask_prob,
    )


def _cmd_pretrain(args) -> int:
    from . import bpe
    from . import corpus as C
    from .checkpoint import save_checkpoint
    from .transformer import PretrainOptions, TrainingDiverged, init_params, pretrain

    cfg = _Config(args.config)
    cfg.fill(args, "model", {"layers": int, "heads": int, "hidden": int, "ffn_dim": int,
                             "max_len": int, "mask_prob": float})
    cfg.fill(args, "pretrain", {"steps": int, "batch_size": int, "learning_rate": float, "seed": int})
    for name, value in [("layers", 4), ("heads", 4), ("hidden", 128), ("ffn_dim", 512),
                        ("max_len", 128), ("mask_prob", 0.15), ("steps", 2000),
                        ("batch_size", 32), ("learning_rate", 1e-4), ("seed", 0)]:
        _default(args, name, value)

    corp = C.load_records(args.input)
    if not corp.records:
        raise CliError("pretraining corpus is empty")
    vocab = bpe.load_vocab(args.vocab)
    params = init_params(_model_config_from(args), vocab.size, args.seed)
    options = PretrainOptions(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        steps=args.steps,
        seed=args.seed,
    )
    try:
        params, losses = pretrain(corp.texts(), vocab, params, options, progress=not args.quiet)
    except TrainingDiverged as exc:
        raise CliError(str(exc)) from exc
    save_checkpoint(args.output, params, vocab.content_hash())
    first = sum(losses[:100]) / max(len(losses[:100]), 1)
    last = sum(losses[-100:]) / max(len(losses[-100:]), 1)
    print(f"pretrained {args.steps} steps; loss {first:.4f} -> {last:.4f}; checkpoint {args.output}")
    return 0


def _load_labeled(args):
    from . import corpus as C

    corp = C.load_records(args.input)
    if not corp.labels:
        print("input carries no noisy labels; applying the built-in supervision rules")
        corp = C.apply_supervision(corp)
    return corp


def _load_model(args):
    from . import bpe
    from .checkpoint import load_checkpoint

    vocab = bpe.load_vocab(args.vocab)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.vocab_hash != vocab.content_hash():
        raise CliError("checkpoint was trained with a different vocabulary file")
    return vocab, ckpt


def _cmd_tune(args) -> int:
    from .checkpoint import save_checkpoint
    from .tuning import TuneConfig, tune_classification, tune_reconstruction

    cfg = _Config(args.config)
    cfg.fill(args, "tune", {"learning_rate": float, "epochs": int, "batch_size": int,
                            "recon_rounds": int, "retained_fraction": float,
                            "multiline_window": int, "multiline_max_gap": int, "seed": int})
    for name, value in [("learning_rate", 5e-5), ("epochs", 5), ("batch_size", 32),
                        ("recon_rounds", 5), ("retained_fraction", 0.95),
                        ("multiline_window", 3), ("multiline_max_gap", 600), ("seed", 0)]:
        _default(args, name, value)

    vocab, ckpt = _load_model(args)
    corp = _load_labeled(args)
    tc = TuneConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        recon_rounds=args.recon_rounds,
        retained_fraction=args.retained_fraction,
        multiline_window=args.multiline_window,
        multiline_max_gap=args.multiline_max_gap,
        seed=args.seed,
    )
    if args.method == "recon":
        params, projector, history = tune_reconstruction(
            ckpt.params, vocab, corp, tc, progress=not args.quiet
        )
        save_checkpoint(args.output, params, ckpt.vocab_hash, projector=projector, tuning_mode="recon")
        print(f"pos/neg error ratio {history.ratio_before:.3f} -> {history.ratios[-1] if history.ratios else history.ratio_before:.3f}; checkpoint {args.output}")
    else:
        mode = "multi" if args.method == "classif-multi" else "single"
        head, losses = tune_classification(ckpt.params, vocab, corp, tc, input_mode=mode,
                                           progress=not args.quiet)
        save_checkpoint(args.output, ckpt.params, ckpt.vocab_hash, projector=ckpt.projector,
                        head=head, tuning_mode=args.method)
        print(f"head trained ({args.method}); final loss {losses[-1]:.4f}; checkpoint {args.output}")
    return 0


def _write_scores(path, rows) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for rid, score, sha in rows:
            fh.write(json.dumps({"record_id": rid, "score": score, "input_sha": sha},
                                sort_keys=True) + "\n")


def _cmd_score(args) -> int:
    from . import corpus as C
    from .pca import fit_pca, reconstruction_errors
    from .transformer import embed_corpus_mean
    from .tuning import build_multiline_examples, score_classification_batch

    cfg = _Config(args.config)
    cfg.fill(args, "score", {"k": int, "retained_fraction": float,
                             "multiline_window": int, "multiline_max_gap": int})
    for name, value in [("k", 1), ("retained_fraction", 0.95),
                        ("multiline_window", 3), ("multiline_max_gap", 600)]:
        _default(args, name, value)

    corp = C.load_records(args.input)
    if not corp.records:
        _write_scores(args.output, [])
        print(f"no records to score; wrote empty {args.output}")
        return 0

    vocab, ckpt = _load_model(args)
    texts = corp.texts()
    ids = [r.record_id for r in corp.records]

    if args.method == "pca":
        if args.fit_input:
            fit_texts = C.load_records(args.fit_input).texts()
        else:
            fit_texts = texts
        proj = fit_pca(embed_corpus_mean(ckpt.params, vocab, fit_texts), args.retained_fraction)
        scores = reconstruction_errors(proj, embed_corpus_mean(ckpt.params, vocab, texts))
        rows = [(rid, float(s), _input_sha(t)) for rid, s, t in zip(ids, scores, texts)]
    elif args.method == "recon":
        if ckpt.projector is None:
            raise CliError("checkpoint has no projector; run `tune --method recon` first")
        scores = reconstruction_errors(ckpt.projector, embed_corpus_mean(ckpt.params, vocab, texts))
        rows = [(rid, float(s), _input_sha(t)) for rid, s, t in zip(ids, scores, texts)]
    elif args.method == "classif":
        if ckpt.head is None:
            raise CliError("checkpoint has no classifier head; run `tune --method classif` first")
        if ckpt.head.input_mode != "single":
            raise CliError("checkpoint head was tuned on multi-line inputs; use --method classif-multi")
        scores = score_classification_batch(ckpt.params, vocab, ckpt.head, texts)
        rows = [(rid, float(s), _input_sha(t)) for rid, s, t in zip(ids, scores, texts)]
    elif args.method == "classif-multi":
        if ckpt.head is None:
            raise CliError("checkpoint has no classifier head; run `tune --method classif-multi` first")
        if ckpt.head.input_mode != "multi":
            raise CliError("checkpoint head was tuned on single lines; use --method classif")
        examples = build_multiline_examples(corp, args.multiline_window, args.multiline_max_gap)
        joined = [text for text, _, _ in examples]
        anchors = [anchor for _, _, anchor in examples]
        scores = score_classification_batch(ckpt.params, vocab, ckpt.head, joined)
        rows = [(a, float(s), _input_sha(t)) for a, s, t in zip(anchors, scores, joined)]
    elif args.method == "retrieval":
        from .retrieval import load_index, score_corpus_knn_malicious

        if not args.index:
            raise CliError("retrieval scoring needs --index")
        index = load_index(args.index)
        vectors = embed_corpus_mean(ckpt.params, vocab, texts)
        scores = score_corpus_knn_malicious(index, vectors, args.k)
        rows = [(rid, float(s), _input_sha(t)) for rid, s, t in zip(ids, scores, texts)]
    else:
        raise CliError(f"unknown scoring method {args.method!r}")

    _write_scores(args.output, rows)
    print(f"scored {len(rows)} inputs with {args.method} -> {args.output}")
    return 0


def _cmd_build_index(args) -> int:
    from .retrieval import build_index, save_index

    vocab, ckpt = _load_model(args)
    corp = _load_labeled(args)
    index = build_index(ckpt.params, vocab, corp)
    save_index(index, args.output)
    print(f"indexed {len(index)} records ({index.n_malicious} flagged malicious) -> {args.output}")
    return 0


def _cmd_evaluate(args) -> int:
    import json

    from . import corpus as C
    from .corpus import simulate_commercial_ids
    from .evaluation import ScoredPrediction, evaluate

    cfg = _Config(args.config)
    cfg.fill(args, "eval", {"u": float, "top": str})
    _default(args, "u", 1.0)
    _default(args, "top", "50,100")
    v_list = [int(v) for v in str(args.top).split(",") if v]

    corp = C.load_records(args.corpus)
    by_id = {r.record_id: r for r in corp.records}

    preds: list[ScoredPrediction] = []
    seen_sha: set[str] = set()
    with open(args.scores, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            rid = row["record_id"]
            rec = by_id.get(rid)
            if rec is None:
                raise CliError(f"scores reference unknown record_id {rid!r}")
            sha = row.get("input_sha")
            if sha is not None:
                if sha in seen_sha:
                    continue  # de-duplicated test set: keep first occurrence
                seen_sha.add(sha)
            truth = corp.truth.get(rid)
            if truth is None:
                raise CliError(f"record {rid!r} has no ground truth; cannot evaluate")
            flag = corp.labels.get(rid)
            if flag is None:
                flag = simulate_commercial_ids(rec)
            preds.append(ScoredPrediction(
                record_id=rid, score=float(row["score"]), inbox_flag=bool(flag), truth=truth,
            ))
    if not preds:
        raise CliError("no scored predictions to evaluate")

    report = evaluate(preds, v_list=v_list, recall_target=args.u, multi_line=args.multi)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    text = report.format_table()
    if args.report_text:
        with open(args.report_text, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# Argument wiring
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmdlm",
        description="Command-line language model pipeline: generate, preprocess, "
                    "tokenize, pretrain, tune, score, and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI config file with per-stage defaults")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.add_argument("--deterministic", action="store_true",
                       help="pin numeric libraries to one thread for reproducible bytes")

    p = sub.add_parser("gen-corpus", help="generate a synthetic labeled corpus")
    common(p)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--benign", type=int)
    p.add_argument("--inbox", type=int)
    p.add_argument("--oob", type=int)
    p.add_argument("--invalid", type=int)
    p.add_argument("--no-labels", action="store_true", help="skip the rule-based noisy labels")
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("preprocess", help="parse, frequency-filter, and clean a corpus")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--allowlist", help="explicit allowlist file (one name per line)")
    p.add_argument("--min-count", type=int, help="frequency cutoff when building the allowlist")
    p.add_argument("--removed", help="optional TSV of removed record ids and reasons")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train-tokenizer", help="learn a BPE vocabulary")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--vocab-size", type=int)
    p.set_defaults(func=_cmd_train_tokenizer)

    p = sub.add_parser("pretrain", help="train the masked-token encoder")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--mask-prob", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("tune", help="inject noisy supervision")
    common(p)
    p.add_argument("--method", required=True, choices=["recon", "classif", "classif-multi"])
    p.add_argument("--input", required=True, help="labeled corpus (JSONL with noisy_label)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--recon-rounds", type=int)
    p.add_argument("--retained-fraction", type=float)
    p.add_argument("--multiline-window", type=int)
    p.add_argument("--multiline-max-gap", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("score", help="score a corpus with a trained method")
    common(p)
    p.add_argument("--method", required=True,
                   choices=["pca", "recon", "classif", "classif-multi", "retrieval"])
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--index", help="embedding index for retrieval scoring")
    p.add_argument("--fit-input", help="corpus to fit the projector on (pca method)")
    p.add_argument("--k", type=int, help="neighbor count for retrieval")
    p.add_argument("--retained-fraction", type=float)
    p.add_argument("--multiline-window", type=int)
    p.add_argument("--multiline-max-gap", type=int)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("build-index", help="embed a labeled corpus into a retrieval index")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_build_index)

    p = sub.add_parser("evaluate", help="compute the intrusion metrics report")
    common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True, help="machine-readable JSON report")
    p.add_argument("--report-text", help="also write the human-readable table here")
    p.add_argument("--u", type=float, help="in-box recall target (default 1.0)")
    p.add_argument("--top", help="comma-separated list of top-v cutoffs (default 50,100)")
    p.add_argument("--multi", action="store_true",
                   help="multi-line evaluation: report top-v precision only")
    p.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "deterministic", False):
        _pin_threads()
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
