# Pretrain a small masked-token encoder and query it for plausible fills.
#
# Scaled down to run in about a minute; raise the corpus size and step count
# (see the acceptance suite) for a sharper model.

import numpy as np

from cmdlm import (
    PretrainOptions,
    TransformerConfig,
    generate_synthetic_corpus,
    init_params,
    predict_masked,
    pretrain,
    train_bpe,
)

corpus = generate_synthetic_corpus(seed=3, n_benign=4000, n_inbox=60, n_oob=60, n_invalid=0)
vocab = train_bpe(corpus.texts(), vocab_size=500)

config = TransformerConfig(n_layers=2, n_heads=4, hidden=64, ffn_dim=256, max_len=64, mask_prob=0.15)
params = init_params(config, vocab.size, seed=0)
params, losses = pretrain(
    corpus.texts(), vocab, params,
    PretrainOptions(steps=800, batch_size=32, seed=0, learning_rate=3e-4),
    progress=True,
)
print(f"\nloss: {np.mean(losses[:50]):.3f} -> {np.mean(losses[-50:]):.3f}")

for probe in [
    "[MASK] http://mirror.example.com/agent.sh | bash",
    "docker [MASK]",
    "tar [MASK] /tmp/backup-3.tar.gz /opt/app",
]:
    print(f"{probe:55s} -> {predict_masked(params, vocab, probe, 3)}")
