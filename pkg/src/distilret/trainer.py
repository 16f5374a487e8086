"""Distillation training loop primitives.

One training step, per question in the batch: retrieve top-K candidates
from the (possibly stale) published index, score them with the frozen
teacher, re-encode question and candidates with the current parameters to
get fresh scores, and descend the KL divergence from the teacher's softmax
to the student's. Gradients flow only through the fresh scores; the
discrete candidate selection is a stop-gradient. The loss is averaged over
the batch, and a single bias-corrected Adam update is applied per step.

Also here: ablation candidate composers (uniform / positive+negative
mixes / in-batch), the warmup-then-linear-decay schedule, and checkpoint
serialization (float32 parameters, float64 optimizer moments).
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .encoder import (
    PASSAGE,
    QUESTION,
    EncoderParams,
    GradientBuffer,
    SideParams,
    backward,
    backward_batch,
    encode,
    forward,
    forward_batch,
    passage_input_ids,
)
from .evaluation import BM25Index
from .corpus import words
from .index import EmbeddingIndex, search
from .teacher import TeacherConfig, TeacherError, TeacherProtocolError, score_candidates

CHECKPOINT_MAGIC = b"DRCK"
CHECKPOINT_FORMAT = 1


class TrainerError(Exception):
    """Invalid trainer input or an unrecoverable step failure."""


def student_distribution(fresh_scores, tau: float) -> np.ndarray:
    """softmax(scores / tau), max-subtracted for stability."""
    scores = np.asarray(fresh_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise TrainerError(f"need a non-empty score vector, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise TrainerError("non-finite fresh score")
    if not tau > 0:
        raise TrainerError(f"temperature must be > 0, got {tau}")
    z = scores / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def teacher_distribution(log_probs) -> np.ndarray:
    """softmax of the relevance scores; invariant to a constant shift."""
    values = np.asarray(log_probs, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise TrainerError(f"need a non-empty log-prob vector, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise TrainerError("non-finite teacher log-prob")
    z = values - values.max()
    e = np.exp(z)
    return e / e.sum()


def _check_simplex(name: str, p: np.ndarray) -> None:
    if p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
        raise TrainerError(f"{name} is not a distribution (sum={p.sum()}, min={p.min()})")


def kl_loss_and_grad(teacher: np.ndarray, student: np.ndarray, fresh_scores, tau: float):
    """KL(teacher || student) and its exact gradient w.r.t. fresh scores.

    The log-student is recomputed from fresh_scores via log-sum-exp, so the
    loss stays finite even when a softmax probability underflows; the
    gradient is (student - teacher) / tau.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    scores = np.asarray(fresh_scores, dtype=np.float64)
    if teacher.shape != student.shape or teacher.shape != scores.shape:
        raise TrainerError(
            f"shape mismatch: teacher {teacher.shape}, student {student.shape}, scores {scores.shape}"
        )
    _check_simplex("teacher", teacher)
    _check_simplex("student", student)
    if np.any((teacher > 0) & (student == 0)):
        raise TrainerError("infinite KL: student assigns zero mass where the teacher does not")
    z = scores / tau
    z = z - z.max()
    log_student = z - np.log(np.exp(z).sum())
    mask = teacher > 0
    loss = float(np.sum(teacher[mask] * (np.log(teacher[mask]) - log_student[mask])))
    grad = (student - teacher) / tau
    return loss, grad


def lr_at(step: int, warmup_steps: int, total_steps: int, peak: float) -> float:
    """Linear 0 -> peak over warmup, then linear peak -> 0 at total_steps."""
    if not 0 <= warmup_steps <= total_steps:
        raise TrainerError(f"need 0 <= warmup ({warmup_steps}) <= total ({total_steps})")
    if step > total_steps:
        return 0.0
    if step <= warmup_steps:
        return peak if warmup_steps == 0 else peak * step / warmup_steps
    return peak * (total_steps - step) / (total_steps - warmup_steps)


@dataclass
class AdamState:
    m: GradientBuffer
    v: GradientBuffer
    t: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(m=GradientBuffer.zeros_like(params), v=GradientBuffer.zeros_like(params))


def adam_update(
    params: EncoderParams,
    grads: GradientBuffer,
    adam: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step over every parameter array, in place."""
    adam.t += 1
    for (_, p), (_, g), (_, m), (_, v) in zip(
        params.arrays(), grads.arrays(), adam.m.arrays(), adam.v.arrays()
    ):
        kernels.adam_step(p.ravel(), g.ravel(), m.ravel(), v.ravel(), lr, beta1, beta2, eps, adam.t)


@dataclass(frozen=True)
class AblationSpec:
    """Candidate composition policy.

    topk: the K nearest candidates from the stale index (the standard loop).
    mix: p gold passages + n BM25 hard negatives + u uniform random.
    inbatch: union of gold passages (plus n hard negatives each) across the
    batch, shared by every question in it.
    """

    mode: str
    p: int = 0
    n: int = 0
    u: int = 0

    @classmethod
    def parse(cls, text: str) -> "AblationSpec":
        if text == "topk":
            return cls(mode="topk")
        if text == "inbatch":
            return cls(mode="inbatch")
        if text.startswith("inbatch:"):
            return cls(mode="inbatch", n=int(text.split(":", 1)[1]))
        if text.startswith("mix:"):
            parts = text[len("mix:") :].split(",")
            if len(parts) != 3:
                raise TrainerError(f"mix spec needs three counts 'mix:P,N,U', got {text!r}")
            p, n, u = (int(x) for x in parts)
            if p < 0 or n < 0 or u < 0 or p + n + u < 1:
                raise TrainerError(f"mix counts must be non-negative and sum to >= 1: {text!r}")
            return cls(mode="mix", p=p, n=n, u=u)
        raise TrainerError(f"unknown ablation mode {text!r}")


def _sampling_rng(seed: int, step: int, qid: str) -> np.random.Generator:
    return np.random.default_rng([seed, step, zlib.crc32(qid.encode("utf-8"))])


def dropout_seed(seed: int, step: int, qid: str, slot: int) -> int:
    entropy = [seed, step, zlib.crc32(qid.encode("utf-8")), slot]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


class CandidateComposer:
    """Builds the candidate row list for each question under a policy."""

    def __init__(self, spec: AblationSpec, passages, seed: int, k: int):
        self.spec = spec
        self.passages = passages
        self.seed = seed
        self.k = k
        self.row_of_pid = {p.id: i for i, p in enumerate(passages)}
        self._bm25 = BM25Index(passages) if (spec.mode in ("mix", "inbatch") and spec.n > 0) else None
        self._mined: dict[str, tuple[int, ...]] = {}

    def _gold_row(self, question) -> int:
        gold = getattr(question, "gold_pid", None)
        if gold is None:
            raise TrainerError(
                f"candidate mode {self.spec.mode!r} needs gold annotations, "
                f"but question {question.id!r} has none"
            )
        if gold not in self.row_of_pid:
            raise TrainerError(f"gold passage {gold!r} of question {question.id!r} not in corpus")
        return self.row_of_pid[gold]

    def _hard_negative_rows(self, question, n: int) -> tuple[int, ...]:
        if question.id not in self._mined:
            gold = getattr(question, "gold_pid", None)
            ranked = self._bm25.rank(words(question.text), n + 1)
            rows = [self.row_of_pid[pid] for pid, _ in ranked if pid != gold]
            self._mined[question.id] = tuple(rows[:n])
        return self._mined[question.id]

    def compose(self, question, index: EmbeddingIndex, params: EncoderParams, step: int, batch) -> np.ndarray:
        spec = self.spec
        if spec.mode == "topk":
            q_emb = encode(question.tokens, QUESTION, params)
            k = min(self.k, index.m)
            return search(q_emb, k, index).indices
        if spec.mode == "inbatch":
            rows = set()
            for q in batch:
                rows.add(self._gold_row(q))
                if spec.n > 0:
                    rows.update(self._hard_negative_rows(q, spec.n))
            return np.asarray(sorted(rows), dtype=np.int64)
        # mix: p golds, n BM25 hard negatives, u uniform (all distinct)
        chosen: list[int] = []
        if spec.p > 0:
            gold_row = self._gold_row(question)
            if spec.p > 1:
                raise TrainerError(f"mix requests {spec.p} positives but questions carry one gold id")
            chosen.append(gold_row)
        if spec.n > 0:
            negs = self._hard_negative_rows(question, spec.n)
            if len(negs) < spec.n:
                raise TrainerError(f"only {len(negs)} BM25 negatives available for {question.id!r}")
            chosen.extend(negs)
        if spec.u > 0:
            pool = np.setdiff1d(np.arange(len(self.passages), dtype=np.int64), np.asarray(chosen, dtype=np.int64))
            if len(pool) < spec.u:
                raise TrainerError(f"corpus too small for {spec.u} uniform candidates")
            rng = _sampling_rng(self.seed, step, question.id)
            chosen.extend(int(r) for r in rng.choice(pool, size=spec.u, replace=False))
        return np.asarray(chosen, dtype=np.int64)


@dataclass
class TrainerState:
    """Everything a training run mutates, plus the knobs train_step reads."""

    params: EncoderParams
    adam: AdamState
    step: int = 0
    skipped_steps: int = 0
    tau: float = 1.0
    k: int = 8
    batch_size: int = 16
    seed: int = 0
    dropout_rate: float = 0.1
    warmup_steps: int = 100
    total_steps: int = 1000
    peak_lr: float = 0.05
    dev_history: list = field(default_factory=list)  # [step, metric value] pairs

    @classmethod
    def fresh(cls, params: EncoderParams, **hyper) -> "TrainerState":
        return cls(params=params, adam=AdamState.zeros_like(params), **hyper)


@dataclass(frozen=True)
class StepReport:
    step: int
    loss: float
    lr: float
    grad_norm: float
    index_version: int
    ms: float
    skipped: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "loss": round(self.loss, 10),
                "lr": self.lr,
                "grad_norm": round(self.grad_norm, 10),
                "index_version": self.index_version,
                "ms": round(self.ms, 3),
            }
        )


def question_loss_and_grads(
    question,
    rows: np.ndarray,
    teacher_values,
    state: TrainerState,
    passages,
    grads: GradientBuffer,
):
    """Fresh-score the candidates, form both distributions, accumulate the
    exact gradient of KL(teacher || student) into `grads`.

    Returns (loss, fresh_scores, student). Dropout seeds derive from
    (run seed, step, question id, candidate slot), so a step is replayable.
    """
    params = state.params
    q_emb, q_cache = forward(
        question.tokens,
        QUESTION,
        params,
        train_mode=True,
        seed=dropout_seed(state.seed, state.step, question.id, 0),
        dropout_rate=state.dropout_rate,
    )
    p_embs = []
    p_caches = []
    for j, row in enumerate(rows):
        emb, cache = forward(
            passage_input_ids(passages[row]),
            PASSAGE,
            params,
            train_mode=True,
            seed=dropout_seed(state.seed, state.step, question.id, j + 1),
            dropout_rate=state.dropout_rate,
        )
        p_embs.append(emb)
        p_caches.append(cache)
    fresh = np.array([float(np.dot(q_emb, e)) for e in p_embs])
    student = student_distribution(fresh, state.tau)
    teacher = teacher_distribution(teacher_values)
    loss, dscores = kl_loss_and_grad(teacher, student, fresh, state.tau)
    d_q = np.zeros_like(q_emb)
    for j, emb in enumerate(p_embs):
        d_q += dscores[j] * emb
        backward(p_caches[j], params, dscores[j] * q_emb, grads)
    backward(q_cache, params, d_q, grads)
    return loss, fresh, student


def train_step(
    batch,
    state: TrainerState,
    index: EmbeddingIndex,
    teacher_cfg: TeacherConfig,
    composer: CandidateComposer,
    passages,
) -> StepReport:
    """One optimizer step over a batch of questions.

    Candidate retrieval uses the published (stale) index; gradients flow
    through the fresh scores only. A teacher failure aborts the step and is
    retried once before becoming fatal. A non-finite gradient skips the
    update and is counted.
    """
    if not batch:
        raise TrainerError("empty batch")
    t0 = time.perf_counter()
    scored = None
    last_error = None
    for _ in range(2):
        try:
            scored = []
            for question in batch:
                rows = composer.compose(question, index, state.params, state.step, batch)
                values = [s.value for s in score_candidates(question, [passages[r] for r in rows], teacher_cfg)]
                scored.append((question, rows, values))
            break
        except TeacherProtocolError:
            raise
        except TeacherError as exc:
            scored = None
            last_error = exc
    if scored is None:
        raise TrainerError(f"teacher failed twice, aborting: {last_error}") from last_error

    # Batched equivalent of question_loss_and_grads over the whole batch:
    # every question and every candidate is one bag, encoded in two batch
    # passes, and the per-question KL gradients fan out through two batch
    # backward passes. Dropout seeds match the per-question path exactly.
    # Without dropout a passage encodes identically in every slot, so each
    # distinct candidate row is encoded once and its upstream gradients sum.
    grads = GradientBuffer.zeros_like(state.params)
    params = state.params
    dedupe = state.dropout_rate == 0.0
    q_bags, q_seeds, cand_bags, cand_seeds = [], [], [], []
    bounds = [0]
    for question, rows, _ in scored:
        q_bags.append(np.asarray(question.tokens, dtype=np.int64))
        q_seeds.append(dropout_seed(state.seed, state.step, question.id, 0))
        if not dedupe:
            for j, row in enumerate(rows):
                cand_bags.append(passage_input_ids(passages[row]))
                cand_seeds.append(dropout_seed(state.seed, state.step, question.id, j + 1))
        bounds.append(bounds[-1] + len(rows))
    if dedupe:
        all_rows = np.concatenate([np.asarray(rows, dtype=np.int64) for _, rows, _ in scored])
        uniq_rows, slot_of = np.unique(all_rows, return_inverse=True)
        cand_bags = [passage_input_ids(passages[r]) for r in uniq_rows]
    else:
        slot_of = np.arange(bounds[-1])
    q_out, q_cache = forward_batch(
        q_bags, QUESTION, params, train_mode=True, seeds=q_seeds, dropout_rate=state.dropout_rate
    )
    p_out, p_cache = forward_batch(
        cand_bags, PASSAGE, params, train_mode=True, seeds=cand_seeds, dropout_rate=state.dropout_rate
    )
    d_q = np.zeros_like(q_out)
    d_p = np.zeros_like(p_out)
    total_loss = 0.0
    for i, (question, rows, values) in enumerate(scored):
        slots = slot_of[bounds[i] : bounds[i + 1]]
        block = p_out[slots]
        fresh = block @ q_out[i]
        student = student_distribution(fresh, state.tau)
        teacher = teacher_distribution(values)
        loss, dscores = kl_loss_and_grad(teacher, student, fresh, state.tau)
        total_loss += loss
        d_q[i] = block.T @ dscores
        np.add.at(d_p, slots, np.outer(dscores, q_out[i]))
    backward_batch(q_cache, params, d_q, grads)
    backward_batch(p_cache, params, d_p, grads)
    grads.scale_(1.0 / len(batch))
    mean_loss = total_loss / len(batch)

    update_number = state.step + 1
    lr = lr_at(update_number, state.warmup_steps, state.total_steps, state.peak_lr)
    grad_norm = grads.global_norm()
    skipped = not np.isfinite(grad_norm)
    if skipped:
        state.skipped_steps += 1
    else:
        adam_update(state.params, grads, state.adam, lr)
    state.step = update_number
    ms = (time.perf_counter() - t0) * 1000.0
    return StepReport(
        step=state.step,
        loss=mean_loss,
        lr=lr,
        grad_norm=grad_norm,
        index_version=index.version,
        ms=ms,
        skipped=skipped,
    )


def best_checkpoint_step(dev_history) -> int | None:
    """Step whose dev metric is highest; earliest wins ties."""
    best = None
    for step, value in dev_history:
        if best is None or value > best[1]:
            best = (step, value)
    return None if best is None else best[0]


def save_checkpoint(path, state: TrainerState, config_snapshot: dict, index_version: int) -> None:
    """Binary layout: magic, format u32, header-length u64, JSON header,
    then raw array blobs (params float32 LE, Adam moments float64 LE) in
    the canonical parameter order. Byte-stable for identical state.
    """
    arrays: list[tuple[str, np.ndarray, str]] = []
    for name, arr in state.params.arrays():
        arrays.append((f"params.{name}", arr, "<f4"))
    for name, arr in state.adam.m.arrays():
        arrays.append((f"adam_m.{name}", arr, "<f8"))
    for name, arr in state.adam.v.arrays():
        arrays.append((f"adam_v.{name}", arr, "<f8"))
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "config": config_snapshot,
        "step": state.step,
        "adam_t": state.adam.t,
        "skipped_steps": state.skipped_steps,
        "index_version": index_version,
        "dev_history": [[int(s), float(v)] for s, v in state.dev_history],
        "hyper": {
            "tau": state.tau,
            "k": state.k,
            "batch_size": state.batch_size,
            "seed": state.seed,
            "dropout_rate": state.dropout_rate,
            "warmup_steps": state.warmup_steps,
            "total_steps": state.total_steps,
            "peak_lr": state.peak_lr,
        },
        "dims": list(state.params.dims),
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": d} for n, a, d in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_FORMAT, len(blob)))
        fh.write(blob)
        for _, arr, dtype in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path) -> tuple[TrainerState, dict, int]:
    """Returns (state, config snapshot, index version at save time)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise TrainerError(f"not a checkpoint file (bad magic {magic!r})")
        fmt, blob_len = struct.unpack("<IQ", fh.read(12))
        if fmt != CHECKPOINT_FORMAT:
            raise TrainerError(f"checkpoint format version {fmt}, expected {CHECKPOINT_FORMAT}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        loaded: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = fh.read(count * np.dtype(spec["dtype"]).itemsize)
            loaded[spec["name"]] = (
                np.frombuffer(raw, dtype=spec["dtype"]).reshape(spec["shape"]).astype(np.float64)
            )

    def side(prefix: str) -> SideParams:
        return SideParams(
            emb=loaded[f"{prefix}.emb"],
            w1=loaded[f"{prefix}.w1"],
            b1=loaded[f"{prefix}.b1"],
            w2=loaded[f"{prefix}.w2"],
            b2=loaded[f"{prefix}.b2"],
        )

    params = EncoderParams(question=side("params.question"), passage=side("params.passage"))
    adam = AdamState(
        m=GradientBuffer(question=side("adam_m.question"), passage=side("adam_m.passage")),
        v=GradientBuffer(question=side("adam_v.question"), passage=side("adam_v.passage")),
        t=header["adam_t"],
    )
    hyper = header["hyper"]
    state = TrainerState(
        params=params,
        adam=adam,
        step=header["step"],
        skipped_steps=header["skipped_steps"],
        tau=hyper["tau"],
        k=hyper["k"],
        batch_size=hyper["batch_size"],
        seed=hyper["seed"],
        dropout_rate=hyper["dropout_rate"],
        warmup_steps=hyper["warmup_steps"],
        total_steps=hyper["total_steps"],
        peak_lr=hyper["peak_lr"],
        dev_history=[(int(s), float(v)) for s, v in header["dev_history"]],
    )
    return state, header["config"], header["index_version"]
