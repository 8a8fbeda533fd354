# Generate a labeled synthetic command-line corpus and look inside it.
#
# The generator mixes parameterized benign traffic, malicious templates the
# rule engine catches ("in-box"), near-miss variants it misses ("out-of-box"),
# and a few unparsable junk lines. The rule engine plays the role of a noisy
# supervision source: its labels are trustworthy when positive and unreliable
# when negative.

from collections import Counter

from cmdlm import apply_supervision, generate_synthetic_corpus, simulate_commercial_ids

corpus = generate_synthetic_corpus(seed=1, n_benign=200, n_inbox=10, n_oob=10, n_invalid=4)
corpus = apply_supervision(corpus)

print(f"{len(corpus)} records over {len({r.user_id for r in corpus.records})} users")
print("truth categories:", dict(Counter(corpus.truth.values())))
print("rule-engine flags:", sum(corpus.labels.values()))

print("\nsample records:")
for rec in corpus.records[:6]:
    truth = corpus.truth.get(rec.record_id, "junk")
    print(f"  [{truth:6s}] {rec.user_id} @ {rec.timestamp}: {rec.text}")

print("\nlabel noise in action:")
for rec in corpus.records:
    if corpus.truth.get(rec.record_id) == "oob":
        print(f"  malicious but unflagged (label={simulate_commercial_ids(rec)}): {rec.text}")
