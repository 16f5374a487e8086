"""Retrieval evaluation: answer-span accuracy, Recall@K, nDCG@10, BM25.

Answer matching is done on normalized words (lowercase, punctuation
dropped): an answer counts as found when its word sequence appears
contiguously in the passage text. Titles are not searched.

BM25 here serves two roles: lexical baseline and hard-negative miner. It
scores with the Okapi formula over title+text words and ranks all passages
with deterministic (score descending, passage id ascending) ordering, so
results do not depend on corpus file order.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import words


class EvalError(Exception):
    """Invalid run, qrel, or metric request."""


@dataclass
class RetrievalRun:
    """Per-question rankings of (passage id, score), best first."""

    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, qid: str, ranking: list[tuple[str, float]]) -> None:
        if qid in self.rankings:
            raise EvalError(f"duplicate qid in run: {qid!r}")
        pids = [pid for pid, _ in ranking]
        if len(set(pids)) != len(pids):
            raise EvalError(f"duplicate passage ids in ranking for {qid!r}")
        keys = [(-score, pid) for pid, score in ranking]
        if keys != sorted(keys):
            raise EvalError(f"ranking for {qid!r} is not ordered by (score desc, id asc)")
        self.rankings[qid] = list(ranking)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            if self.metadata:
                fh.write(json.dumps({"metadata": self.metadata}, sort_keys=True) + "\n")
            for qid in self.rankings:
                row = {"qid": qid, "ranking": [{"pid": p, "score": s} for p, s in self.rankings[qid]]}
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RetrievalRun":
        run = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                if "metadata" in row:
                    run.metadata = row["metadata"]
                    continue
                run.add(row["qid"], [(e["pid"], float(e["score"])) for e in row["ranking"]])
        return run


@dataclass
class QrelSet:
    """Ground truth: answer strings per question, or graded relevant ids."""

    answers: dict[str, tuple[str, ...]] | None = None
    graded: dict[str, dict[str, int]] | None = None

    @classmethod
    def from_questions(cls, questions) -> "QrelSet":
        missing = [q.id for q in questions if not q.answers]
        if missing:
            raise EvalError(f"questions without answers cannot be evaluated: {missing[:5]}")
        return cls(answers={q.id: tuple(q.answers) for q in questions})

    @classmethod
    def load_graded(cls, path) -> "QrelSet":
        graded: dict[str, dict[str, int]] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise EvalError(f"qrel line {line_no}: expected 'qid<TAB>pid<TAB>grade'")
                qid, pid, grade = parts
                graded.setdefault(qid, {})[pid] = int(grade)
        return cls(graded=graded)


def contains_answer(passage, answers) -> bool:
    """True iff some answer's word sequence occurs contiguously in the
    passage text (title excluded). Comparison is on normalized words.
    """
    if not answers:
        raise EvalError("contains_answer needs at least one answer string")
    text_words = words(passage.text)
    for answer in answers:
        answer_words = words(answer)
        n = len(answer_words)
        if n == 0:
            continue
        if any(text_words[i : i + n] == answer_words for i in range(len(text_words) - n + 1)):
            return True
    return False


def topk_accuracy(run: RetrievalRun, qrels: QrelSet, ks, passages_by_id) -> dict[int, float]:
    """Fraction of questions with an answer-bearing passage in the top K."""
    if qrels.answers is None:
        raise EvalError("topk_accuracy needs answer-mode qrels")
    missing = [qid for qid in run.rankings if qid not in qrels.answers]
    if missing:
        raise EvalError(f"questions missing from qrels: {missing}")
    if not run.rankings:
        raise EvalError("empty run")
    ks = sorted(ks)
    hit_rank: list[int | None] = []
    for qid, ranking in run.rankings.items():
        answers = qrels.answers[qid]
        rank = None
        for pos, (pid, _) in enumerate(ranking, start=1):
            if contains_answer(passages_by_id[pid], answers):
                rank = pos
                break
        hit_rank.append(rank)
    n = len(hit_rank)
    return {k: sum(1 for r in hit_rank if r is not None and r <= k) / n for k in ks}


@dataclass(frozen=True)
class GradedResult:
    value: float
    evaluated: int
    excluded: int  # questions with no relevant passage in the qrels


def _graded_for(run: RetrievalRun, qrels: QrelSet):
    if qrels.graded is None:
        raise EvalError("this metric needs graded qrels")
    missing = [qid for qid in run.rankings if qid not in qrels.graded]
    if missing:
        raise EvalError(f"questions missing from qrels: {missing}")
    for qid, ranking in run.rankings.items():
        grades = {pid: g for pid, g in qrels.graded[qid].items() if g > 0}
        yield qid, ranking, grades


def recall_at_k(run: RetrievalRun, qrels: QrelSet, k: int) -> GradedResult:
    """Fraction of relevant ids found in the top k, macro-averaged."""
    total, evaluated, excluded = 0.0, 0, 0
    for _, ranking, grades in _graded_for(run, qrels):
        if not grades:
            excluded += 1
            continue
        retrieved = {pid for pid, _ in ranking[:k]}
        total += len(retrieved & set(grades)) / len(grades)
        evaluated += 1
    if evaluated == 0:
        raise EvalError("no question has a relevant passage in the qrels")
    return GradedResult(value=total / evaluated, evaluated=evaluated, excluded=excluded)


def _dcg(gains) -> float:
    return sum(g / math.log2(rank + 1) for rank, g in enumerate(gains, start=1))


def ndcg_at_10(run: RetrievalRun, qrels: QrelSet) -> GradedResult:
    """Linear-gain DCG with log2 discount over the top 10, divided by the
    DCG of the ideal reordering of all graded passages.
    """
    total, evaluated, excluded = 0.0, 0, 0
    for _, ranking, grades in _graded_for(run, qrels):
        if not grades:
            excluded += 1
            continue
        gains = [grades.get(pid, 0) for pid, _ in ranking[:10]]
        ideal = sorted(grades.values(), reverse=True)[:10]
        total += _dcg(gains) / _dcg(ideal)
        evaluated += 1
    if evaluated == 0:
        raise EvalError("no question has a relevant passage in the qrels")
    return GradedResult(value=total / evaluated, evaluated=evaluated, excluded=excluded)


class BM25Index:
    """Okapi BM25 over passage title+text words (reserved tokens ignored).

    idf = ln((N - df + 0.5) / (df + 0.5) + 1); per-term contribution
    idf * tf (k1+1) / (tf + k1 (1 - b + b dl/avgdl)), repeated query terms
    weighted by their multiplicity.
    """

    def __init__(self, passages, k1: float = 0.9, b: float = 0.4):
        self.k1 = k1
        self.b = b
        self.n_docs = len(passages)
        if self.n_docs == 0:
            raise EvalError("BM25 needs a non-empty corpus")
        self.doc_len: dict[str, int] = {}
        self.postings: dict[str, dict[str, int]] = {}
        for passage in passages:
            terms = words(passage.title) + words(passage.text)
            self.doc_len[passage.id] = len(terms)
            for term, tf in Counter(terms).items():
                self.postings.setdefault(term, {})[passage.id] = tf
        self.avgdl = sum(self.doc_len.values()) / self.n_docs

    def rank(self, question_words, k: int) -> list[tuple[str, float]]:
        scores = dict.fromkeys(self.doc_len, 0.0)
        for term, qtf in sorted(Counter(question_words).items()):
            plist = self.postings.get(term)
            if not plist:
                continue
            df = len(plist)
            idf = math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)
            for pid, tf in plist.items():
                denom = tf + self.k1 * (1.0 - self.b + self.b * self.doc_len[pid] / self.avgdl)
                scores[pid] += qtf * idf * tf * (self.k1 + 1.0) / denom
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k]


def bm25_rank(question_words, passages, k1: float = 0.9, b: float = 0.4, k: int = 10):
    return BM25Index(passages, k1=k1, b=b).rank(question_words, k)


REPORT_SCHEMA_VERSION = 1


def emit_report(metrics: dict, fmt: str, path) -> None:
    """Write metrics as an aligned two-row table or versioned JSON.

    Column order follows the metrics dict; identical inputs produce
    byte-identical files.
    """
    path = Path(path)
    if fmt == "json":
        payload = {"schema_version": REPORT_SCHEMA_VERSION, "metrics": dict(metrics)}
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    elif fmt == "table":
        names = list(metrics)
        values = [f"{metrics[n]:.4f}" if isinstance(metrics[n], float) else str(metrics[n]) for n in names]
        widths = [max(len(n), len(v)) for n, v in zip(names, values)]
        header = "  ".join(n.ljust(w) for n, w in zip(names, widths))
        row = "  ".join(v.ljust(w) for v, w in zip(values, widths))
        path.write_text(header.rstrip() + "\n" + row.rstrip() + "\n", encoding="utf-8")
    else:
        raise EvalError(f"unknown report format {fmt!r}")
