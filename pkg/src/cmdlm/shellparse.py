"""Shell command-line parsing, name extraction, and allowlist filtering.

The accepted grammar is a POSIX-shell subset: simple commands with quoting,
pipes, ``&&`` / ``||`` / ``;`` / ``&`` connectors, the redirections ``>``
``>>`` ``<`` ``>&`` and fd duplications like ``2>&1``, and command
substitution ``$(...)`` / backticks, which is kept as an opaque blob. Anything
outside that subset (unknown operators like ``->`` or ``<<``, unbalanced
quotes, missing commands around operators) is a `ParseError` carrying the
offending position.

Commands are split into a name, flags (tokens starting with ``-`` after the
name), and arguments. No expansion, globbing, or variable resolution is
performed; a command line is parsed for structure, not evaluated.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .corpus import Corpus

# Connector operator kinds.
OP_PIPE = "pipe"
OP_AND = "and"
OP_OR = "or"
OP_SEQUENCE = "sequence"
OP_BACKGROUND = "background"
# Redirection kinds (attached to the command they follow).
OP_REDIRECT_OUT = "redirect_out"
OP_REDIRECT_APPEND = "redirect_append"
OP_REDIRECT_IN = "redirect_in"
OP_FD_DUPLICATE = "fd_duplicate"

_CONNECTOR_KINDS = {"|": OP_PIPE, "&&": OP_AND, "||": OP_OR, ";": OP_SEQUENCE, "&": OP_BACKGROUND}


class ParseError(Exception):
    """Command line falls outside the supported shell subset."""

    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"at position {position}: {reason}")


@dataclass(frozen=True)
class Substitution:
    """Opaque ``$(...)`` or `` `...` `` command substitution."""

    inner: str


@dataclass(frozen=True)
class Redirect:
    kind: str          # redirect_out | redirect_append | redirect_in | fd_duplicate
    lexeme: str        # as written, e.g. ">>", "2>", ">&", "2>&1"
    target: str | None  # fd duplications carry their target in the lexeme


@dataclass(frozen=True)
class Command:
    name: str
    flags: tuple[str, ...] = ()
    args: tuple[str, ...] = ()
    redirects: tuple[Redirect, ...] = ()
    substitutions: tuple[Substitution, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise ValueError("command name must be non-empty")


@dataclass(frozen=True)
class Operator:
    kind: str
    left: "Node"
    right: "Node | None"  # background may have no right-hand side


Node = Command | Operator


@dataclass(frozen=True)
class ParseTree:
    root: Node

    def commands(self) -> list[Command]:
        """All Command nodes, left to right."""
        out: list[Command] = []
        stack: list[Node] = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Command):
                out.append(node)
                continue
            if node.right is not None:
                stack.append(node.right)
            stack.append(node.left)
        return out


# --------------------------------------------------------------------------
# Lexer
# --------------------------------------------------------------------------

_METACHARS = set("|&;<>")
_WORD_NEEDS_QUOTE = set(" \t|&;<>'\"\\$`()*?[]{}~#!")


@dataclass
class _Word:
    value: str                # quotes stripped, escapes applied
    subs: list[str] = field(default_factory=list)
    has_sub: bool = False
    pos: int = 0


@dataclass
class _Op:
    lexeme: str
    pos: int


def _scan_substitution_dollar(text: str, i: int) -> tuple[str, int]:
    # text[i:i+2] == "$(" ; returns (raw including $(), next index)
    depth = 0
    j = i + 1
    while j < len(text):
        c = text[j]
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
            if depth == 0:
                return text[i : j + 1], j + 1
        j += 1
    raise ParseError(i, "unbalanced '$(' substitution")


def _scan_substitution_backtick(text: str, i: int) -> tuple[str, int]:
    j = i + 1
    while j < len(text):
        if text[j] == "\\" and j + 1 < len(text):
            j += 2
            continue
        if text[j] == "`":
            return text[i : j + 1], j + 1
        j += 1
    raise ParseError(i, "unbalanced '`' substitution")


def _tokenize(text: str) -> list[_Word | _Op]:
    tokens: list[_Word | _Op] = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c in " \t\r\n":
            i += 1
            continue

        if c in _METACHARS:
            start = i
            two = text[i : i + 2]
            if two in ("&&", "||", ">>"):
                tokens.append(_Op(two, start))
                i += 2
                continue
            if two == "<<":
                raise ParseError(start, "unknown operator '<<'")
            if two == "&>":
                raise ParseError(start, "unknown operator '&>'")
            if two in (">&", "<&"):
                # ">&N" / "<&N" duplicate an fd; ">& word" redirects to a file.
                j = i + 2
                while j < n and text[j].isdigit():
                    j += 1
                if j > i + 2 and (j >= n or text[j] in " \t\r\n" or text[j] in _METACHARS):
                    tokens.append(_Op(text[i:j], start))
                    i = j
                    continue
                tokens.append(_Op(two, start))
                i += 2
                continue
            tokens.append(_Op(c, start))
            i += 1
            continue

        if c in "()":
            raise ParseError(i, f"unsupported token {c!r} (subshells are out of scope)")

        # Word scan. A leading digit run directly before a redirection char is
        # the fd prefix of the operator (e.g. "2>&1", "2>/dev/null").
        start = i
        j = i
        while j < n and text[j].isdigit():
            j += 1
        if j > i and j < n and text[j] in "<>":
            fd = text[i:j]
            nxt = text[j : j + 2]
            if nxt in (">&", "<&"):
                m = j + 2
                while m < n and text[m].isdigit():
                    m += 1
                if m > j + 2:
                    tokens.append(_Op(fd + text[j:m], start))
                    i = m
                else:
                    tokens.append(_Op(fd + nxt, start))
                    i = j + 2
                continue
            if nxt == ">>":
                tokens.append(_Op(fd + ">>", start))
                i = j + 2
                continue
            tokens.append(_Op(fd + text[j], start))
            i = j + 1
            continue

        word = _Word(value="", pos=start)
        buf: list[str] = []
        while i < n:
            c = text[i]
            if c in " \t\r\n" or c in _METACHARS or c in "()":
                break
            if c == "'":
                end = text.find("'", i + 1)
                if end == -1:
                    raise ParseError(i, "unbalanced single quote")
                buf.append(text[i + 1 : end])
                i = end + 1
                continue
            if c == '"':
                j = i + 1
                while j < n:
                    d = text[j]
                    if d == "\\" and j + 1 < n and text[j + 1] in '"\\$`':
                        buf.append(text[j + 1])
                        j += 2
                        continue
                    if d == '"':
                        break
                    if d == "$" and text[j : j + 2] == "$(":
                        raw, j2 = _scan_substitution_dollar(text, j)
                        word.subs.append(raw[2:-1])
                        word.has_sub = True
                        buf.append(raw)
                        j = j2
                        continue
                    if d == "`":
                        raw, j2 = _scan_substitution_backtick(text, j)
                        word.subs.append(raw[1:-1])
                        word.has_sub = True
                        buf.append(raw)
                        j = j2
                        continue
                    buf.append(d)
                    j += 1
                if j >= n:
                    raise ParseError(i, "unbalanced double quote")
                i = j + 1
                continue
            if c == "\\":
                if i + 1 >= n:
                    raise ParseError(i, "dangling backslash")
                buf.append(text[i + 1])
                i += 2
                continue
            if c == "$" and text[i : i + 2] == "$(":
                raw, i2 = _scan_substitution_dollar(text, i)
                word.subs.append(raw[2:-1])
                word.has_sub = True
                buf.append(raw)
                i = i2
                continue
            if c == "`":
                raw, i2 = _scan_substitution_backtick(text, i)
                word.subs.append(raw[1:-1])
                word.has_sub = True
                buf.append(raw)
                i = i2
                continue
            if c == "-" and text[i : i + 2] == "->":
                raise ParseError(i, "unknown operator '->'")
            buf.append(c)
            i += 1
        word.value = "".join(buf)
        if not word.value and not word.has_sub:
            raise ParseError(start, "empty word")
        tokens.append(word)
    return tokens


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _classify_redirect(lexeme: str) -> tuple[str, bool]:
    """Return (kind, needs_target) for a redirection operator lexeme."""
    body = lexeme.lstrip("0123456789")
    if body.startswith((">&", "<&")) and len(body) > 2 and body[2:].isdigit():
        return OP_FD_DUPLICATE, False
    if body in (">", ">&"):
        return OP_REDIRECT_OUT, True
    if body == ">>":
        return OP_REDIRECT_APPEND, True
    if body in ("<", "<&"):
        return OP_REDIRECT_IN, True
    raise AssertionError(f"unrecognized redirect lexeme {lexeme!r}")


def _parse_command(tokens: list[_Word | _Op], i: int) -> tuple[Command, int]:
    name: str | None = None
    flags: list[str] = []
    args: list[str] = []
    redirects: list[Redirect] = []
    subs: list[Substitution] = []
    start_pos = tokens[i].pos if i < len(tokens) else 0
    saw_any = False
    while i < len(tokens):
        tok = tokens[i]
        if isinstance(tok, _Op):
            if tok.lexeme in _CONNECTOR_KINDS:
                break
            kind, needs_target = _classify_redirect(tok.lexeme)
            target = None
            if needs_target:
                if i + 1 >= len(tokens) or not isinstance(tokens[i + 1], _Word):
                    raise ParseError(tok.pos, f"redirection {tok.lexeme!r} missing target")
                target_word = tokens[i + 1]
                target = target_word.value
                for s in target_word.subs:
                    subs.append(Substitution(s))
                i += 2
            else:
                i += 1
            redirects.append(Redirect(kind=kind, lexeme=tok.lexeme, target=target))
            saw_any = True
            continue
        # word
        if name is None:
            name = tok.value
        elif tok.value.startswith("-") and len(tok.value) > 1 and not tok.has_sub:
            flags.append(tok.value)
        else:
            args.append(tok.value)
        for s in tok.subs:
            subs.append(Substitution(s))
        saw_any = True
        i += 1
    if not saw_any or name is None:
        raise ParseError(start_pos, "missing command")
    return (
        Command(
            name=name,
            flags=tuple(flags),
            args=tuple(args),
            redirects=tuple(redirects),
            substitutions=tuple(subs),
        ),
        i,
    )


def _parse_pipeline(tokens: list[_Word | _Op], i: int) -> tuple[Node, int]:
    node, i = _parse_command(tokens, i)
    result: Node = node
    while i < len(tokens) and isinstance(tokens[i], _Op) and tokens[i].lexeme == "|":
        op_pos = tokens[i].pos
        i += 1
        if i >= len(tokens):
            raise ParseError(op_pos, "missing command after '|'")
        rhs, i = _parse_command(tokens, i)
        result = Operator(kind=OP_PIPE, left=result, right=rhs)
    return result, i


def parse_command_line(text: str) -> ParseTree:
    """Parse one command line into a tree, or raise `ParseError`."""
    if not isinstance(text, str):
        raise TypeError("command line must be a string")
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError(0, "empty command line")

    node, i = _parse_pipeline(tokens, 0)
    while i < len(tokens):
        tok = tokens[i]
        assert isinstance(tok, _Op) and tok.lexeme in _CONNECTOR_KINDS
        kind = _CONNECTOR_KINDS[tok.lexeme]
        i += 1
        if i >= len(tokens):
            if kind == OP_BACKGROUND:
                node = Operator(kind=OP_BACKGROUND, left=node, right=None)
                break
            raise ParseError(tok.pos, f"missing command after {tok.lexeme!r}")
        rhs, i = _parse_pipeline(tokens, i)
        node = Operator(kind=kind, left=node, right=rhs)
    return ParseTree(root=node)


# --------------------------------------------------------------------------
# Rendering (inverse of parsing, up to token spacing)
# --------------------------------------------------------------------------

def _quote_word(value: str, has_sub: bool) -> str:
    if has_sub:
        return value  # raw substitution text must survive re-parsing
    if value and not (set(value) & _WORD_NEEDS_QUOTE):
        return value
    return "'" + value.replace("'", "'\"'\"'") + "'"


_CONNECTOR_LEXEME = {v: k for k, v in _CONNECTOR_KINDS.items()}


def render(tree: ParseTree) -> str:
    """Render a tree back to text; re-parsing yields an equal tree."""

    def render_node(node: Node) -> str:
        if isinstance(node, Command):
            parts = [_quote_word(node.name, "$(" in node.name or "`" in node.name)]
            for f in node.flags:
                parts.append(_quote_word(f, False))
            for a in node.args:
                parts.append(_quote_word(a, "$(" in a or "`" in a))
            for r in node.redirects:
                if r.target is None:
                    parts.append(r.lexeme)
                else:
                    parts.append(f"{r.lexeme} {_quote_word(r.target, '$(' in r.target or '`' in r.target)}")
            return " ".join(parts)
        left = render_node(node.left)
        if node.right is None:
            return f"{left} {_CONNECTOR_LEXEME[node.kind]}"
        return f"{left} {_CONNECTOR_LEXEME[node.kind]} {render_node(node.right)}"

    return render_node(tree.root)


# --------------------------------------------------------------------------
# Name extraction, frequency filtering, allowlists
# --------------------------------------------------------------------------

def extract_command_names(tree: ParseTree) -> list[str]:
    """Names of all Command nodes in left-to-right order."""
    return [c.name for c in tree.commands()]


@dataclass(frozen=True)
class FrequencyTable:
    counts: dict[str, int]


@dataclass(frozen=True)
class AllowList:
    names: frozenset[str]

    def __contains__(self, name: str) -> bool:
        return name in self.names


def build_frequency_table(corpus: Corpus) -> FrequencyTable:
    """Count command-name occurrences over all parsable records."""
    counts: Counter[str] = Counter()
    for rec in corpus.records:
        try:
            tree = parse_command_line(rec.text)
        except ParseError:
            continue
        counts.update(extract_command_names(tree))
    return FrequencyTable(counts=dict(counts))


def default_min_count(corpus_size: int) -> int:
    """Corpus-relative low-frequency cutoff: max(2, 1e-5 * size)."""
    return max(2, int(1e-5 * corpus_size))


def build_allowlist(table: FrequencyTable, min_count: int) -> AllowList:
    """Keep names whose occurrence count reaches `min_count`."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    names = frozenset(n for n, c in table.counts.items() if c >= min_count)
    if not names:
        raise ValueError("allowlist is empty; min_count would filter every record")
    return AllowList(names=names)


def load_allowlist(path) -> AllowList:
    """Read an allowlist file: one command name per line, '#' comments."""
    names = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                names.add(line)
    if not names:
        raise ValueError(f"allowlist file {path} contains no names")
    return AllowList(names=frozenset(names))


REASON_PARSE_ERROR = "parse_error"
REASON_NAME_NOT_ALLOWED = "name_not_allowed"


def filter_valid(corpus: Corpus, allowlist: AllowList) -> tuple[Corpus, list[tuple[str, str]]]:
    """Drop records that fail parsing or use a command name off the allowlist.

    Returns the kept corpus and a list of (record_id, reason) for removals.
    """
    kept = []
    removed: list[tuple[str, str]] = []
    for rec in corpus.records:
        try:
            tree = parse_command_line(rec.text)
        except ParseError:
            removed.append((rec.record_id, REASON_PARSE_ERROR))
            continue
        names = extract_command_names(tree)
        if any(n not in allowlist for n in names):
            removed.append((rec.record_id, REASON_NAME_NOT_ALLOWED))
            continue
        kept.append(rec)
    kept_ids = {r.record_id for r in kept}
    kept_corpus = Corpus(
        records=kept,
        labels={k: v for k, v in corpus.labels.items() if k in kept_ids},
        truth={k: v for k, v in corpus.truth.items() if k in kept_ids},
    )
    return kept_corpus, removed
