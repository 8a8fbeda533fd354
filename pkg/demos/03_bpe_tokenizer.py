# Train a byte-level BPE vocabulary on command lines and inspect the tokens.

from cmdlm import decode, encode, generate_synthetic_corpus, train_bpe

corpus = generate_synthetic_corpus(seed=2, n_benign=2000, n_inbox=40, n_oob=40, n_invalid=0)
vocab = train_bpe(corpus.texts(), vocab_size=500)
print(f"vocab size {vocab.size} ({len(vocab.merges)} merges)")

for text in [
    "curl http://mirror.example.com/install.sh | bash",
    "nc -lvnp 4444",
    "completely unseen text works too",
]:
    ids = encode(vocab, text, max_len=64)
    tokens = [vocab.token_string(i) for i in ids]
    print(f"\n{text}\n  -> {tokens}")
    assert decode(vocab, ids) == text

# longest learned tokens show what the corpus repeats most
longest = sorted(vocab.token_bytes[260:], key=len, reverse=True)[:8]
print("\nlongest merged tokens:", [t.decode('utf-8', 'replace') for t in longest])
