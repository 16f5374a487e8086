"""Corpus ingestion: tokenization, vocabulary construction, passage segmentation.

Text normalization is deliberately simple: lowercase, split on whitespace
and punctuation boundaries, punctuation dropped. The same normalizer is
shared by vocabulary construction, query tokenization, BM25, and answer
span matching so all of them see identical token streams.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

UNK, SEP, BOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<unk>", "<sep>", "<bos>", "<eos>")

_WORD_RE = re.compile(r"[a-z0-9]+")


class CorpusError(Exception):
    """Fatal corpus problem (duplicate id, empty corpus, unreadable file)."""


def words(text: str) -> list[str]:
    """Normalize raw text to a list of lowercase alphanumeric words."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token <-> id map with fixed reserved ids 0..3."""

    tokens: tuple[str, ...]  # non-reserved tokens, id = RESERVED + position
    token_to_id: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        mapping = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
        for i, tok in enumerate(self.tokens):
            mapping[tok] = len(RESERVED_TOKENS) + i
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(RESERVED_TOKENS) + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        if token_id < len(RESERVED_TOKENS):
            return RESERVED_TOKENS[token_id]
        return self.tokens[token_id - len(RESERVED_TOKENS)]

    def decode(self, token_ids) -> str:
        return " ".join(self.token_of(t) for t in token_ids)

    def save(self, path) -> None:
        payload = {"format_version": 1, "reserved": list(RESERVED_TOKENS), "tokens": list(self.tokens)}
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format_version") != 1:
            raise CorpusError(f"unsupported vocabulary format_version: {payload.get('format_version')!r}")
        return cls(tokens=tuple(payload["tokens"]))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Map raw text to token ids; out-of-vocabulary words become <unk>."""
    return [vocab.id_of(w) for w in words(text)]


def build_vocabulary(passages_path, min_count: int = 1) -> Vocabulary:
    """Count words over title and text of a passage file and keep those with
    frequency >= min_count, ordered by (descending frequency, lexicographic).
    """
    counts: Counter[str] = Counter()
    n_lines = 0
    with open(passages_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            n_lines += 1
            record = json.loads(line)
            counts.update(words(record.get("title", "")))
            counts.update(words(record.get("text", "")))
    if n_lines == 0 or not counts:
        raise CorpusError(f"empty corpus: {passages_path}")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(tokens=tuple(kept))


@dataclass(frozen=True)
class Passage:
    id: str
    title: str
    text: str
    title_tokens: tuple[int, ...]
    text_tokens: tuple[int, ...]


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    tokens: tuple[int, ...]
    answers: tuple[str, ...] | None = None
    gold_pid: str | None = None  # source passage id, when the dataset records one


@dataclass
class IngestResult:
    """Records kept in file order plus per-line rejection diagnostics."""

    passages: list
    rejected: int
    errors: list[tuple[int, str]]


def make_passage(pid: str, title: str, text: str, vocab: Vocabulary) -> Passage:
    return Passage(
        id=pid,
        title=title,
        text=text,
        title_tokens=tuple(tokenize(title, vocab)),
        text_tokens=tuple(tokenize(text, vocab)),
    )


def ingest_passages(path, vocab: Vocabulary) -> IngestResult:
    """Read newline-delimited JSON passages ({"id","title","text"}).

    Malformed lines and records whose text tokenizes to nothing are rejected
    with a per-line diagnostic; a duplicate id aborts the whole ingest.
    Titles may be empty (only the text is required to carry tokens).
    """
    passages: list[Passage] = []
    errors: list[tuple[int, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                pid = record["id"]
                title = record.get("title", "")
                text = record["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                errors.append((line_no, f"malformed record: {exc}"))
                continue
            if pid in seen:
                raise CorpusError(f"duplicate passage id {pid!r} at line {line_no}")
            seen.add(pid)
            passage = make_passage(pid, title, text, vocab)
            if not passage.text_tokens:
                errors.append((line_no, f"passage {pid!r} has no text tokens"))
                continue
            passages.append(passage)
    return IngestResult(passages=passages, rejected=len(errors), errors=errors)


def ingest_questions(path, vocab: Vocabulary) -> IngestResult:
    """Read newline-delimited JSON questions ({"id","question","answers"?})."""
    questions: list[Question] = []
    errors: list[tuple[int, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                qid = record["id"]
                text = record["question"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                errors.append((line_no, f"malformed record: {exc}"))
                continue
            if qid in seen:
                raise CorpusError(f"duplicate question id {qid!r} at line {line_no}")
            seen.add(qid)
            tokens = tuple(tokenize(text, vocab))
            if not tokens:
                errors.append((line_no, f"question {qid!r} has no tokens"))
                continue
            answers = record.get("answers")
            questions.append(
                Question(
                    id=qid,
                    text=text,
                    tokens=tokens,
                    answers=tuple(answers) if answers else None,
                    gold_pid=record.get("gold_pid"),
                )
            )
    return IngestResult(passages=questions, rejected=len(errors), errors=errors)


# A trailing window shorter than this many words is merged into the previous
# segment rather than emitted on its own.
MIN_TAIL_WORDS = 10


def segment_document(article_id: str, title: str, body: str, vocab: Vocabulary, window: int = 100) -> list[Passage]:
    """Split an article into consecutive non-overlapping word windows.

    Every segment inherits the article title and is ided "articleid-k".
    A final partial window of fewer than MIN_TAIL_WORDS words is appended
    to the previous segment (or kept alone if it is the only one).
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    body_words = body.split()
    if not body_words:
        return []
    chunks = [body_words[i : i + window] for i in range(0, len(body_words), window)]
    if len(chunks) > 1 and len(chunks[-1]) < MIN_TAIL_WORDS:
        tail = chunks.pop()
        chunks[-1] = chunks[-1] + tail
    return [
        make_passage(f"{article_id}-{k}", title, " ".join(chunk), vocab)
        for k, chunk in enumerate(chunks)
    ]
