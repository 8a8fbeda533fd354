# Unsupervised anomaly detection: PCA reconstruction error over embeddings.
#
# Fit the projector on the corpus embedding cloud, keep 95% of the variance,
# and score each command by how badly the retained subspace reconstructs it.
# No labels are involved; rare structure simply reconstructs worse.

import numpy as np

from cmdlm import (
    PretrainOptions,
    TransformerConfig,
    embed_corpus_mean,
    fit_pca,
    generate_synthetic_corpus,
    init_params,
    pretrain,
    rank_by_error,
    train_bpe,
)

corpus = generate_synthetic_corpus(seed=4, n_benign=4000, n_inbox=40, n_oob=40, n_invalid=0)
vocab = train_bpe(corpus.texts(), vocab_size=500)
config = TransformerConfig(n_layers=2, n_heads=4, hidden=64, ffn_dim=256, max_len=64, mask_prob=0.15)
params = init_params(config, vocab.size, seed=0)
params, _ = pretrain(corpus.texts(), vocab, params,
                     PretrainOptions(steps=600, batch_size=32, seed=0, learning_rate=3e-4))

embedder = lambda texts: embed_corpus_mean(params, vocab, texts)
projector = fit_pca(embedder(corpus.texts()), retained_fraction=0.95)
print(f"kept {projector.p} of {projector.q} directions")

ranked = rank_by_error(projector, corpus, embedder)
by_id = {r.record_id: r for r in corpus.records}
print("\nhighest reconstruction errors:")
for rid, score in ranked[:10]:
    truth = corpus.truth.get(rid, "junk")
    print(f"  {score:8.3f} [{truth:6s}] {by_id[rid].text}")

scores = dict(ranked)
mal = [scores[r.record_id] for r in corpus.records if corpus.truth.get(r.record_id) in ("inbox", "oob")]
ben = [scores[r.record_id] for r in corpus.records if corpus.truth.get(r.record_id) == "benign"]
print(f"\nmedian error: malicious {np.median(mal):.3f} vs benign {np.median(ben):.3f}")
