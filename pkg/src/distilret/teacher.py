"""Frozen teacher scoring: how well does a passage explain the question?

A relevance score is the mean per-token log-probability (natural log) of
the question under a conditional model given the passage. Two backends:

* toy: a copy-smoothed unigram conditional, pure and deterministic, so the
  whole training loop is testable offline. P(t | passage) =
  (count(t in passage) + alpha) / (len(passage) + alpha * |V|).
* external: a scoring service speaking newline-delimited JSON over the
  stdio of a spawned subprocess or a local TCP socket.

Wire protocol (v=1), one JSON object per line:
  request: {"v":1, "qid": str, "question": str,
            "passages": [{"id": str, "title": str, "text": str}]}
  reply:   {"v":1, "qid": str, "scores": [float]}   # one per passage
  error:   {"v":1, "qid": str, "error": str}
Replies may arrive out of order and are matched by qid. Scores are mean
token log-probabilities, natural log, finite, <= 0; NaN/Inf are protocol
violations. Nothing in this module ever mutates teacher state.
"""

from __future__ import annotations

import json
import math
import os
import select
import shlex
import socket
import subprocess
import time
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

PROTOCOL_VERSION = 1

# Appended by real autoregressive scoring services to the passage before
# conditioning; the toy model has no notion of instructions and ignores it.
INSTRUCTION_SUFFIX = "Please write a question based on this passage."

TOY = "toy"
EXTERNAL = "external"


class TeacherError(Exception):
    """Base class for teacher failures."""


class TeacherUnavailableError(TeacherError):
    """Endpoint unreachable, stream closed, or timed out. Retryable."""


class TeacherProtocolError(TeacherError):
    """Malformed or invariant-violating reply. Not retryable."""


class TeacherReplyError(TeacherError):
    """The teacher answered with an error object for this question."""


@dataclass
class TeacherConfig:
    kind: str = TOY
    alpha: float = 1.0  # toy smoothing, > 0
    vocab_size: int | None = None  # required for kind=toy
    endpoint: str | None = None  # "stdio:<command>" or "tcp:host:port"
    timeout_s: float = 30.0
    client: object | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (TOY, EXTERNAL):
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if self.kind == TOY and not self.alpha > 0:
            raise ValueError(f"toy smoothing alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class RelevanceScore:
    passage_index: int  # position in the scored candidate list
    value: float  # mean token log-probability, nats

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value > 0:
            raise TeacherProtocolError(f"relevance score must be finite and <= 0, got {self.value}")


def toy_token_logprob(q_t: int, prefix, passage_tokens, alpha: float, vocab_size: int) -> float:
    """Copy-smoothed unigram conditional log P(q_t | passage).

    The prefix argument exists for interface parity with autoregressive
    teachers; the toy model is position-independent and ignores it.
    """
    count = sum(1 for t in passage_tokens if t == q_t)
    return math.log((count + alpha) / (len(passage_tokens) + alpha * vocab_size))


@lru_cache(maxsize=131072)
def _token_counts(passage_tokens: tuple) -> Counter:
    return Counter(passage_tokens)


def toy_mean_score(question_tokens, passage_tokens, alpha: float, vocab_size: int) -> float:
    """Mean of toy_token_logprob over the question tokens.

    Token counts per passage are memoized; the arithmetic is identical to
    calling toy_token_logprob per question token.
    """
    if not question_tokens:
        raise TeacherError("cannot score an empty question")
    counts = _token_counts(tuple(passage_tokens))
    plen = len(passage_tokens)
    total = 0.0
    for q_t in question_tokens:
        total += math.log((counts.get(q_t, 0) + alpha) / (plen + alpha * vocab_size))
    return total / len(question_tokens)


def _toy_passage_tokens(passage) -> tuple[int, ...]:
    # The teacher-side passage representation is title followed by text,
    # mirroring what external scorers are sent.
    return tuple(passage.title_tokens) + tuple(passage.text_tokens)


def relevance_score(question, passage, cfg: TeacherConfig, passage_index: int = 0) -> RelevanceScore:
    if cfg.kind != TOY:
        raise TeacherError("single-passage scoring is only defined for the toy teacher; "
                           "external teachers are batched via score_candidates")
    if cfg.vocab_size is None:
        raise TeacherError("toy teacher needs vocab_size")
    value = toy_mean_score(question.tokens, _toy_passage_tokens(passage), cfg.alpha, cfg.vocab_size)
    return RelevanceScore(passage_index=passage_index, value=value)


def score_candidates(question, candidates, cfg: TeacherConfig) -> list[RelevanceScore]:
    """Score every candidate passage for one question, order preserved.

    External scoring sends the whole candidate list in a single request; a
    failed request fails the whole question (no silent truncation).
    """
    if not candidates:
        raise TeacherError("candidates must be non-empty")
    if cfg.kind == TOY:
        return [relevance_score(question, passage, cfg, passage_index=i) for i, passage in enumerate(candidates)]
    client = cfg.client
    if client is None:
        raise TeacherError("external teacher configured without a connected client")
    payload = [{"id": p.id, "title": p.title, "text": p.text} for p in candidates]
    values = client.score(question.id, question.text, payload)
    return [RelevanceScore(passage_index=i, value=v) for i, v in enumerate(values)]


def _validate_reply(reply: dict, qid: str, expected: int) -> list[float]:
    if reply.get("v") != PROTOCOL_VERSION:
        raise TeacherProtocolError(f"protocol version {reply.get('v')!r}, expected {PROTOCOL_VERSION}")
    if "error" in reply:
        raise TeacherReplyError(f"teacher error for {qid}: {reply['error']}")
    scores = reply.get("scores")
    if not isinstance(scores, list) or len(scores) != expected:
        got = len(scores) if isinstance(scores, list) else type(scores).__name__
        raise TeacherProtocolError(f"reply for {qid} has {got} scores, expected {expected}")
    out = []
    for s in scores:
        if not isinstance(s, (int, float)) or isinstance(s, bool) or not math.isfinite(s):
            raise TeacherProtocolError(f"non-finite or non-numeric score in reply for {qid}: {s!r}")
        if s > 0:
            raise TeacherProtocolError(f"positive log-probability in reply for {qid}: {s}")
        out.append(float(s))
    return out


class _NdjsonClient:
    """Shared request/reply machinery: line transport + qid matching.

    Synchronous, one request in flight; replies for other qids (an
    out-of-order teacher) are buffered until asked for.
    """

    def __init__(self, timeout_s: float):
        self.timeout_s = timeout_s
        self._pending: dict[str, dict] = {}
        self._buf = b""

    # transport hooks
    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_some(self, deadline: float) -> bytes:
        raise NotImplementedError

    def _read_reply_line(self, deadline: float) -> dict:
        while b"\n" not in self._buf:
            chunk = self._recv_some(deadline)
            self._buf += chunk
        line, _, self._buf = self._buf.partition(b"\n")
        try:
            reply = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TeacherProtocolError(f"undecodable reply line: {exc}") from exc
        if not isinstance(reply, dict):
            raise TeacherProtocolError(f"reply is not an object: {reply!r}")
        return reply

    def score(self, qid: str, question: str, passages: list[dict]) -> list[float]:
        request = {"v": PROTOCOL_VERSION, "qid": qid, "question": question, "passages": passages}
        self._send_bytes((json.dumps(request) + "\n").encode("utf-8"))
        deadline = time.monotonic() + self.timeout_s
        while qid not in self._pending:
            reply = self._read_reply_line(deadline)
            self._pending[str(reply.get("qid"))] = reply
        return _validate_reply(self._pending.pop(qid), qid, len(passages))

    def close(self) -> None:  # pragma: no cover - overridden
        pass


class StdioTeacherClient(_NdjsonClient):
    """Talks to a scorer spawned as a subprocess, one JSON object per line."""

    def __init__(self, argv: list[str], timeout_s: float = 30.0):
        super().__init__(timeout_s)
        try:
            self.proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
            )
        except OSError as exc:
            raise TeacherUnavailableError(f"cannot spawn teacher {argv!r}: {exc}") from exc

    def _send_bytes(self, data: bytes) -> None:
        if self.proc.poll() is not None:
            raise TeacherUnavailableError("teacher process has exited")
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TeacherUnavailableError(f"teacher stdin closed: {exc}") from exc

    def _recv_some(self, deadline: float) -> bytes:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TeacherUnavailableError(f"teacher reply timed out after {self.timeout_s}s")
        ready, _, _ = select.select([self.proc.stdout], [], [], remaining)
        if not ready:
            raise TeacherUnavailableError(f"teacher reply timed out after {self.timeout_s}s")
        chunk = os.read(self.proc.stdout.fileno(), 65536)
        if not chunk:
            raise TeacherUnavailableError("teacher closed its output stream")
        return chunk

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class TcpTeacherClient(_NdjsonClient):
    """Talks to a scorer listening on a local TCP port."""

    def __init__(self, host: str, port: int, timeout_s: float = 30.0):
        super().__init__(timeout_s)
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout_s)
        except OSError as exc:
            raise TeacherUnavailableError(f"cannot connect to teacher at {host}:{port}: {exc}") from exc

    def _send_bytes(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TeacherUnavailableError(f"teacher connection lost: {exc}") from exc

    def _recv_some(self, deadline: float) -> bytes:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TeacherUnavailableError(f"teacher reply timed out after {self.timeout_s}s")
        self.sock.settimeout(remaining)
        try:
            chunk = self.sock.recv(65536)
        except socket.timeout as exc:
            raise TeacherUnavailableError(f"teacher reply timed out after {self.timeout_s}s") from exc
        except OSError as exc:
            raise TeacherUnavailableError(f"teacher connection lost: {exc}") from exc
        if not chunk:
            raise TeacherUnavailableError("teacher closed the connection")
        return chunk

    def close(self) -> None:
        self.sock.close()


def make_client(endpoint: str, timeout_s: float = 30.0):
    """Endpoint syntax: "stdio:<command line>" or "tcp:<host>:<port>"."""
    if endpoint.startswith("stdio:"):
        argv = shlex.split(endpoint[len("stdio:") :])
        if not argv:
            raise TeacherError("stdio endpoint needs a command")
        return StdioTeacherClient(argv, timeout_s=timeout_s)
    if endpoint.startswith("tcp:"):
        rest = endpoint[len("tcp:") :]
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise TeacherError(f"tcp endpoint must be tcp:host:port, got {endpoint!r}")
        return TcpTeacherClient(host, int(port), timeout_s=timeout_s)
    raise TeacherError(f"unknown endpoint scheme in {endpoint!r}")
