# The whole pipeline through the CLI, ending in the intrusion metrics report.
#
# Equivalent shell session:
#   cmdlm gen-corpus --output corpus.jsonl --seed 3 --benign 4000 --inbox 80 --oob 80 --invalid 8
#   cmdlm preprocess --input corpus.jsonl --output kept.jsonl
#   cmdlm train-tokenizer --input kept.jsonl --output vocab.txt --vocab-size 500
#   cmdlm pretrain --input kept.jsonl --vocab vocab.txt --output model.ckpt ...
#   cmdlm tune --method classif --input kept.jsonl --vocab vocab.txt \
#       --checkpoint model.ckpt --output tuned.ckpt
#   cmdlm score --method classif --input kept.jsonl --vocab vocab.txt \
#       --checkpoint tuned.ckpt --output scores.jsonl
#   cmdlm evaluate --scores scores.jsonl --corpus kept.jsonl --output report.json --u 1.0

import json
import tempfile
from pathlib import Path

from cmdlm.cli import main

work = Path(tempfile.mkdtemp(prefix="cmdlm-demo-"))
print(f"working in {work}\n")

def run(*argv):
    rc = main([str(a) for a in argv])
    assert rc == 0, f"stage failed: {argv[0]}"

run("gen-corpus", "--output", work / "corpus.jsonl", "--seed", 3,
    "--benign", 4000, "--inbox", 80, "--oob", 80, "--invalid", 8)
run("preprocess", "--input", work / "corpus.jsonl", "--output", work / "kept.jsonl")
run("train-tokenizer", "--input", work / "kept.jsonl", "--output", work / "vocab.txt",
    "--vocab-size", 500)
run("pretrain", "--input", work / "kept.jsonl", "--vocab", work / "vocab.txt",
    "--output", work / "model.ckpt", "--layers", 2, "--heads", 4, "--hidden", 64,
    "--ffn-dim", 256, "--max-len", 64, "--steps", 1500, "--batch-size", 32,
    "--learning-rate", "3e-4", "--seed", 0)
run("tune", "--method", "classif", "--input", work / "kept.jsonl",
    "--vocab", work / "vocab.txt", "--checkpoint", work / "model.ckpt",
    "--output", work / "tuned.ckpt", "--learning-rate", "1e-3", "--epochs", 10)
run("score", "--method", "classif", "--input", work / "kept.jsonl",
    "--vocab", work / "vocab.txt", "--checkpoint", work / "tuned.ckpt",
    "--output", work / "scores.jsonl")
run("evaluate", "--scores", work / "scores.jsonl", "--corpus", work / "kept.jsonl",
    "--output", work / "report.json", "--u", "1.0", "--top", "20,50")

print("\nmachine-readable report:")
print(json.dumps(json.loads((work / "report.json").read_text()), indent=2, sort_keys=True))
