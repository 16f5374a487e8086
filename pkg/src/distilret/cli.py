"""Command-line entry point wiring corpus, index, trainer, and eval together.

Subcommands: synth, build-vocab, build-index, train, eval, ablate.
Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command is
replayable from its config and seed; outputs land under the run directory
and inputs are never mutated. Path fields in the config may be overridden
by DISTILRET_<FIELD> environment variables (paths only).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from distilret.config import ConfigError, RunConfig, load_config
from distilret.corpus import (
    CorpusError,
    Vocabulary,
    build_vocabulary,
    ingest_passages,
    ingest_questions,
    words,
)
from distilret.encoder import EncoderError, QUESTION, encode, init_params
from distilret.evaluation import (
    BM25Index,
    EvalError,
    QrelSet,
    RetrievalRun,
    emit_report,
    ndcg_at_10,
    recall_at_k,
    topk_accuracy,
)
from distilret.index import (
    IndexHandle,
    IndexingError,
    build as build_index,
    refresh,
    save_index,
    search,
)
from distilret.synth import SynthError, SynthSpec, generate
from distilret.teacher import EXTERNAL, TOY, TeacherConfig, TeacherError, make_client
from distilret.trainer import (
    AblationSpec,
    CandidateComposer,
    TrainerError,
    TrainerState,
    best_checkpoint_step,
    load_checkpoint,
    save_checkpoint,
    train_step,
)

# tags keep CLI-level random streams disjoint from trainer-level ones
_EPOCH_TAG = 0x45504F43
_SUBSAMPLE_TAG = 0x53554253

_PATH_ENV_FIELDS = ("passages", "train_questions", "dev_questions", "vocab", "run_dir")


class UsageError(Exception):
    """Bad flags or missing inputs; maps to exit code 2."""


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(value: str, flag: str) -> Path:
    if not value:
        raise UsageError(f"{flag} is required")
    p = Path(value)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {p}")
    return p


def _apply_env_overrides(cfg: RunConfig) -> None:
    for field in _PATH_ENV_FIELDS:
        value = os.environ.get(f"DISTILRET_{field.upper()}")
        if value:
            setattr(cfg, field, value)


def _load_run_config(path: str) -> RunConfig:
    cfg = load_config(_require_file(path, "--config"))
    _apply_env_overrides(cfg)
    return cfg


def _ingest_or_die(result, what: str, path: Path):
    for line_no, msg in result.errors:
        print(f"warning: {path}:{line_no}: {msg}", file=sys.stderr)
    if not result.passages:
        raise UsageError(f"no usable {what} records in {path}")
    return list(result.passages)


def _load_world(cfg: RunConfig):
    vocab = Vocabulary.load(_require_file(cfg.vocab, "--config vocab"))
    passages = _ingest_or_die(
        ingest_passages(_require_file(cfg.passages, "--config passages"), vocab),
        "passage", Path(cfg.passages),
    )
    return vocab, passages


def _load_questions(path_value: str, vocab: Vocabulary, flag: str):
    path = _require_file(path_value, flag)
    return _ingest_or_die(ingest_questions(path, vocab), "question", path)


def _subsample(questions, limit: int, seed: int):
    if limit >= len(questions):
        return list(questions)
    rng = np.random.default_rng([seed, _SUBSAMPLE_TAG])
    keep = sorted(rng.choice(len(questions), size=limit, replace=False).tolist())
    return [questions[i] for i in keep]


def _teacher_config(cfg: RunConfig, vocab: Vocabulary) -> TeacherConfig:
    if cfg.teacher_kind == "toy":
        return TeacherConfig(kind=TOY, alpha=cfg.teacher_alpha, vocab_size=len(vocab))
    client = make_client(cfg.teacher_endpoint, timeout_s=cfg.teacher_timeout_s)
    return TeacherConfig(kind=EXTERNAL, endpoint=cfg.teacher_endpoint,
                         timeout_s=cfg.teacher_timeout_s, client=client)


def _source_accuracy(params, passages, questions, ks) -> dict[int, float]:
    """Fraction of questions whose gold passage appears in the top k,
    measured against a freshly encoded index."""
    index = build_index(passages, params, num_shards=1)
    row_of = {p.id: i for i, p in enumerate(passages)}
    kmax = min(max(ks), index.m)
    hits = dict.fromkeys(ks, 0)
    counted = 0
    for q in questions:
        if q.gold_pid is None:
            raise TrainerError(f"question {q.id} has no gold passage id")
        gold_row = row_of.get(q.gold_pid)
        if gold_row is None:
            raise TrainerError(f"question {q.id}: gold passage {q.gold_pid} not in corpus")
        result = search(encode(q.tokens, QUESTION, params), kmax, index)
        where = np.nonzero(result.indices == gold_row)[0]
        counted += 1
        if where.size:
            rank = int(where[0]) + 1
            for k in ks:
                if rank <= k:
                    hits[k] += 1
    return {k: hits[k] / counted for k in ks}


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        seed=args.seed,
        num_passages=args.passages,
        vocab_size=args.vocab_size,
        passage_len=args.passage_len,
        num_train=args.train,
        num_dev=args.dev,
        question_len=args.question_len,
    )
    manifest = generate(spec, args.out)
    print(f"wrote {len(manifest['sha256'])} files to {args.out}")
    return 0


def cmd_build_vocab(args) -> int:
    passages = _require_file(args.passages, "--passages")
    vocab = build_vocabulary(passages, min_count=args.min_count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    manifest = {
        "command": "build-vocab",
        "inputs": {"passages": _sha256_file(passages)},
        "min_count": args.min_count,
        "vocab_size": len(vocab),
    }
    Path(str(out) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"vocab of {len(vocab)} tokens -> {out}")
    return 0


def cmd_build_index(args) -> int:
    passages_path = _require_file(args.passages, "--passages")
    vocab = Vocabulary.load(_require_file(args.vocab, "--vocab"))
    passages = _ingest_or_die(ingest_passages(passages_path, vocab), "passage", passages_path)
    if args.checkpoint:
        state, _, _ = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
        params = state.params
        params_source = {"checkpoint": _sha256_file(Path(args.checkpoint))}
    else:
        params = init_params(len(vocab), args.d_emb, args.d_h, args.d, seed=args.init_seed)
        params_source = {"init_seed": args.init_seed,
                         "dims": [args.d_emb, args.d_h, args.d]}
    index = build_index(passages, params, num_shards=args.num_shards)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, out)
    manifest = {
        "command": "build-index",
        "inputs": {"passages": _sha256_file(passages_path),
                   "vocab": _sha256_file(Path(args.vocab))},
        "params": params_source,
        "num_shards": args.num_shards,
        "rows": index.m,
        "dim": index.dim,
    }
    Path(str(out) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"index of {index.m} rows in {args.num_shards} shards -> {out}")
    return 0


def _train_loop(cfg: RunConfig, run_dir: Path, resume: str | None,
                stop_after: int | None) -> tuple[TrainerState, dict[int, float]]:
    vocab, passages = _load_world(cfg)
    train_qs = _load_questions(cfg.train_questions, vocab, "--config train_questions")
    dev_qs = _load_questions(cfg.dev_questions, vocab, "--config dev_questions")
    if cfg.train_questions_limit is not None:
        train_qs = _subsample(train_qs, cfg.train_questions_limit, cfg.seed)

    if resume:
        state, _, saved_version = load_checkpoint(_require_file(resume, "--resume"))
        if state.params.question.emb.shape[0] != len(vocab):
            raise TrainerError(
                f"checkpoint vocab size {state.params.question.emb.shape[0]} "
                f"does not match corpus vocab size {len(vocab)}"
            )
        index = build_index(passages, state.params, num_shards=cfg.num_shards)
        if saved_version > index.version:
            index = dataclasses.replace(index, version=saved_version)
        steps_mode = "a"
    else:
        init_seed = cfg.init_seed if cfg.init_seed is not None else cfg.seed
        params = init_params(len(vocab), cfg.d_emb, cfg.d_h, cfg.d, seed=init_seed)
        state = TrainerState.fresh(
            params, tau=cfg.tau, k=cfg.k, batch_size=cfg.batch_size, seed=cfg.seed,
            dropout_rate=cfg.dropout, warmup_steps=cfg.warmup_steps,
            total_steps=cfg.total_steps, peak_lr=cfg.peak_lr,
        )
        index = build_index(passages, state.params, num_shards=cfg.num_shards)
        steps_mode = "w"

    handle = IndexHandle(index)
    teacher_cfg = _teacher_config(cfg, vocab)
    composer = CandidateComposer(AblationSpec.parse(cfg.ablation), passages,
                                 seed=cfg.seed, k=cfg.k)
    run_dir.mkdir(parents=True, exist_ok=True)
    epoch_len = max(1, math.ceil(len(train_qs) / cfg.batch_size))
    config_snapshot = cfg.to_dict()

    def checkpoint_now() -> None:
        metric = _source_accuracy(state.params, passages, dev_qs, [cfg.selection_k])[cfg.selection_k]
        state.dev_history.append((state.step, metric))
        path = run_dir / f"step{state.step:06d}.ckpt"
        save_checkpoint(path, state, config_snapshot, handle.snapshot().version)
        best = best_checkpoint_step(state.dev_history)
        best_path = run_dir / f"step{best:06d}.ckpt"
        if best_path.is_file():
            shutil.copyfile(best_path, run_dir / "best.ckpt")
        print(f"step {state.step}: dev top-{cfg.selection_k} {metric:.4f} -> {path.name}",
              file=sys.stderr)

    try:
        with open(run_dir / "steps.jsonl", steps_mode, encoding="utf-8") as steps_out:
            while state.step < cfg.total_steps:
                if stop_after is not None and state.step >= stop_after:
                    break
                epoch = state.step // epoch_len
                slot = state.step % epoch_len
                order = np.random.default_rng([cfg.seed, _EPOCH_TAG, epoch]).permutation(len(train_qs))
                batch_ids = order[slot * cfg.batch_size : (slot + 1) * cfg.batch_size]
                batch = [train_qs[i] for i in batch_ids]
                report = train_step(batch, state, handle.snapshot(), teacher_cfg,
                                    composer, passages)
                steps_out.write(report.to_json() + "\n")
                steps_out.flush()
                if state.step % cfg.refresh_every == 0 and state.step < cfg.total_steps:
                    handle.publish(refresh(passages, state.params, handle.snapshot()))
                if state.step % cfg.checkpoint_every == 0 or state.step == cfg.total_steps:
                    checkpoint_now()
    except TrainerError:
        # persist progress before surfacing the failure
        save_checkpoint(run_dir / f"step{state.step:06d}.ckpt", state,
                        config_snapshot, handle.snapshot().version)
        raise
    finally:
        client = getattr(teacher_cfg, "client", None)
        if client is not None:
            client.close()

    if stop_after is not None and state.step < cfg.total_steps:
        # clean interrupt: leave a resumable checkpoint without dev eval noise
        save_checkpoint(run_dir / f"step{state.step:06d}.ckpt", state,
                        config_snapshot, handle.snapshot().version)

    final = _source_accuracy(state.params, passages, dev_qs, cfg.eval_ks)
    return state, final


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if args.train_questions_limit is not None:
        cfg.train_questions_limit = args.train_questions_limit
    if args.ablation:
        cfg.ablation = args.ablation
    if args.run_dir:
        cfg.run_dir = args.run_dir
    cfg.validate()
    run_dir = Path(cfg.run_dir)
    state, final = _train_loop(cfg, run_dir, args.resume, args.stop_after_step)
    summary = {"step": state.step, "skipped_steps": state.skipped_steps}
    summary.update({f"Top-{k}": round(v, 4) for k, v in final.items()})
    print(json.dumps(summary, sort_keys=True))
    return 0


def _dense_rankings(questions, passages, params, kmax: int, workers: int):
    index = build_index(params=params, passages=passages, num_shards=1)
    kmax = min(kmax, index.m)
    pids = [p.id for p in passages]

    def one(q):
        result = search(encode(q.tokens, QUESTION, params), kmax, index)
        pairs = [(pids[i], s) for i, s in result.pairs()]
        # run files order ties by ascending pid
        pairs.sort(key=lambda t: (-t[1], t[0]))
        return q.id, pairs

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, questions))
    return [one(q) for q in questions]


def _bm25_rankings(questions, passages, kmax: int):
    bm25 = BM25Index(passages)
    return [(q.id, bm25.rank(words(q.text), kmax)) for q in questions]


def cmd_eval(args) -> int:
    cfg = _load_run_config(args.config)
    vocab, passages = _load_world(cfg)
    question_path = args.questions or cfg.dev_questions
    questions = _load_questions(question_path, vocab, "--questions")
    ks = args.ks or cfg.eval_ks
    if sorted(ks) != list(ks):
        raise UsageError("--ks must be ascending")

    graded = QrelSet.load_graded(_require_file(args.qrels, "--qrels")) if args.qrels else None
    kmax = max(ks)
    if graded is not None:
        kmax = max(kmax, 10)

    if args.baseline == "bm25":
        rankings = _bm25_rankings(questions, passages, kmax)
        source = "bm25"
    else:
        state, _, _ = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
        if state.params.question.emb.shape[0] != len(vocab):
            raise TrainerError(
                f"checkpoint vocab size {state.params.question.emb.shape[0]} "
                f"does not match corpus vocab size {len(vocab)}"
            )
        rankings = _dense_rankings(questions, passages, state.params, kmax, args.workers)
        source = "dense"

    run = RetrievalRun(metadata={"source": source, "questions": str(question_path)})
    for qid, pairs in rankings:
        run.add(qid, pairs)
    if args.run_file:
        run.save(args.run_file)

    metrics: dict[str, float | int] = {"questions": len(questions)}
    golds = {q.id: q.gold_pid for q in questions if q.gold_pid is not None}
    if golds:
        for k in ks:
            hit = sum(
                1 for qid, gold in golds.items()
                if any(pid == gold for pid, _ in run.rankings[qid][:k])
            )
            metrics[f"Top-{k}"] = hit / len(golds)
    if any(q.answers for q in questions):
        answerable = [q for q in questions if q.answers]
        span_run = RetrievalRun(metadata={})
        for q in answerable:
            span_run.add(q.id, run.rankings[q.id])
        passages_by_id = {p.id: p for p in passages}
        span = topk_accuracy(span_run, QrelSet.from_questions(answerable), ks, passages_by_id)
        for k in ks:
            metrics[f"Answer-Top-{k}"] = span[k]
    if graded is not None:
        ndcg = ndcg_at_10(run, graded)
        metrics["nDCG@10"] = ndcg.value
        for k in ks:
            metrics[f"Recall@{k}"] = recall_at_k(run, graded, k).value

    out = Path(args.out) if args.out else Path(cfg.run_dir) / f"eval_report.{args.format}"
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_report(metrics, args.format, out)
    sys.stdout.write(out.read_text(encoding="utf-8"))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args.config)
    modes = args.mode or [f"mix:0,0,{cfg.k}", f"mix:1,0,{cfg.k - 1}", "topk"]
    if args.steps:
        cfg.total_steps = args.steps
        cfg.warmup_steps = min(cfg.warmup_steps, args.steps // 10)
    base_dir = Path(cfg.run_dir)
    rows: dict[str, dict[str, float]] = {}
    for mode in modes:
        sub = dataclasses.replace(cfg)
        sub.ablation = mode
        sub.validate()
        mode_dir = base_dir / ("ablate_" + mode.replace(":", "-").replace(",", "_"))
        sub.run_dir = str(mode_dir)
        print(f"=== ablation {mode} -> {mode_dir}", file=sys.stderr)
        _, final = _train_loop(sub, mode_dir, resume=None, stop_after=None)
        rows[mode] = {f"Top-{k}": round(v, 4) for k, v in final.items()}
    report = {"schema_version": 1, "total_steps": cfg.total_steps, "modes": rows}
    out = base_dir / "ablate_report.json"
    base_dir.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distilret",
        description="Train and evaluate a dual-encoder retriever distilled from "
                    "a question-likelihood teacher.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--passages", type=int, default=2000)
    p.add_argument("--vocab-size", type=int, default=500)
    p.add_argument("--passage-len", type=int, default=30)
    p.add_argument("--train", type=int, default=1000)
    p.add_argument("--dev", type=int, default=200)
    p.add_argument("--question-len", type=int, default=5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-vocab", help="build a vocabulary artifact from passages")
    p.add_argument("--passages", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("build-index", help="encode passages into a sharded index")
    p.add_argument("--passages", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-shards", type=int, default=4)
    p.add_argument("--checkpoint", help="take encoder parameters from a checkpoint")
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--d-emb", type=int, default=64)
    p.add_argument("--d-h", type=int, default=64)
    p.add_argument("--d", type=int, default=32)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("train", help="run the distillation training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", help="override the config run_dir")
    p.add_argument("--train-questions-limit", type=int)
    p.add_argument("--ablation", help="candidate composition override")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after-step", type=int, help="pause cleanly after this step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--questions", help="question file override (defaults to dev)")
    p.add_argument("--qrels", help="graded qrel TSV for nDCG / recall")
    p.add_argument("--baseline", choices=["bm25"])
    p.add_argument("--ks", type=int, nargs="+")
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--out", help="report path (default: run_dir/eval_report.<fmt>)")
    p.add_argument("--run-file", help="save the ranked lists as NDJSON")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train once per candidate-composition mode")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", action="append", help="repeatable; default compares "
                   "uniform-only, gold+uniform, and retrieved top-k")
    p.add_argument("--steps", type=int, help="reduced step budget for all modes")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, CorpusError, EncoderError, IndexingError, TeacherError,
            TrainerError, EvalError, SynthError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
