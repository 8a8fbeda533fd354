# Inject noisy rule-engine labels two ways: reconstruction-based tuning of the
# encoder, and a classification head probing the frozen encoder.
#
# The labels are noisy by construction: out-of-box malicious lines come back
# labeled benign. Watch both methods still push the right lines up.

import numpy as np

from cmdlm import (
    PretrainOptions,
    TransformerConfig,
    TuneConfig,
    apply_supervision,
    embed_corpus_cls,
    generate_synthetic_corpus,
    init_params,
    pretrain,
    train_bpe,
    tune_classification,
    tune_reconstruction,
)

corpus = apply_supervision(generate_synthetic_corpus(seed=6, n_benign=4000, n_inbox=80, n_oob=80, n_invalid=0))
vocab = train_bpe(corpus.texts(), vocab_size=500)
config = TransformerConfig(n_layers=2, n_heads=4, hidden=64, ffn_dim=256, max_len=64, mask_prob=0.15)
params = init_params(config, vocab.size, seed=0)
params, _ = pretrain(corpus.texts(), vocab, params,
                     PretrainOptions(steps=1500, batch_size=32, seed=0, learning_rate=3e-4))

# -- reconstruction-based tuning: alternate projector refits + encoder updates
recon_params, projector, history = tune_reconstruction(
    params.copy(), vocab, corpus, TuneConfig(recon_rounds=3, epochs=2, seed=0), progress=True
)
print(f"\npos/neg error ratio: {history.ratio_before:.2f} -> {history.ratios[-1]:.2f}")

# -- classification probing: frozen encoder, small head on [CLS]
# (hotter head settings than the production defaults; demo corpora are tiny)
head, _ = tune_classification(params, vocab, corpus, TuneConfig(learning_rate=1e-3, epochs=10, seed=0))
scores = head.predict_proba(embed_corpus_cls(params, vocab, corpus.texts()))[:, 1]
for group in ("benign", "inbox", "oob"):
    vals = [s for r, s in zip(corpus.records, scores) if corpus.truth.get(r.record_id) == group]
    print(f"head score, {group:6s}: mean {np.mean(vals):.3f}")
