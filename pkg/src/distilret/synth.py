"""Seeded synthetic corpus generator.

Passages are uniform draws over a small word inventory; each question is a
contiguous window of words copied from one source passage, with that
passage's id recorded as gold and the window text recorded as the answer
span. The generator is a desk-scale stand-in for a QA dataset: gold ids
drive source-retrieval accuracy and the copied window drives answer-span
matching. Same seed, same bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SynthError(Exception):
    """Raised for impossible generation parameters."""


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    num_passages: int = 2000
    vocab_size: int = 500
    passage_len: int = 30
    num_train: int = 1000
    num_dev: int = 200
    question_len: int = 5

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise SynthError("seed must be non-negative")
        for name in ("num_passages", "vocab_size", "passage_len", "num_train",
                     "num_dev", "question_len"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be >= 1")
        if self.question_len > self.passage_len:
            raise SynthError("question_len cannot exceed passage_len")


def _word(i: int) -> str:
    return f"w{i:03d}"


def _pid(i: int, width: int) -> str:
    # zero-padded so lexicographic pid order equals corpus order
    return f"p{i:0{width}d}"


def generate(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Write passages, question splits, qrels, and a manifest under out_dir.

    Returns the manifest dict (also written as manifest.json).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([spec.seed])
    pid_width = max(4, len(str(spec.num_passages - 1)))

    word_grids = rng.integers(0, spec.vocab_size, size=(spec.num_passages, spec.passage_len))
    passages = []
    for i in range(spec.num_passages):
        text = " ".join(_word(int(w)) for w in word_grids[i])
        passages.append({"id": _pid(i, pid_width), "title": "", "text": text})

    def make_questions(prefix: str, count: int) -> list[dict]:
        sources = rng.integers(0, spec.num_passages, size=count)
        starts = rng.integers(0, spec.passage_len - spec.question_len + 1, size=count)
        qid_width = max(4, len(str(count - 1)))
        records = []
        for j in range(count):
            src = int(sources[j])
            s = int(starts[j])
            span = " ".join(_word(int(w)) for w in word_grids[src, s : s + spec.question_len])
            records.append(
                {
                    "id": f"{prefix}{j:0{qid_width}d}",
                    "question": span,
                    "answers": [span],
                    "gold_pid": _pid(src, pid_width),
                }
            )
        return records

    train = make_questions("qt", spec.num_train)
    dev = make_questions("qd", spec.num_dev)

    files = {
        "passages.jsonl": _ndjson(passages),
        "train_questions.jsonl": _ndjson(train),
        "dev_questions.jsonl": _ndjson(dev),
        "qrels.tsv": "".join(f"{q['id']}\t{q['gold_pid']}\t1\n" for q in dev),
    }
    for name, content in files.items():
        (out / name).write_text(content, encoding="utf-8")

    manifest = {
        "generator": "distilret.synth",
        "format_version": 1,
        "spec": {
            "seed": spec.seed,
            "num_passages": spec.num_passages,
            "vocab_size": spec.vocab_size,
            "passage_len": spec.passage_len,
            "num_train": spec.num_train,
            "num_dev": spec.num_dev,
            "question_len": spec.question_len,
        },
        "sha256": {name: hashlib.sha256(content.encode("utf-8")).hexdigest()
                   for name, content in sorted(files.items())},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def _ndjson(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
