"""Dual encoder: bag-of-tokens mean pooling followed by a two-layer tanh MLP.

Questions and passages are embedded by fully separate parameter sets into
the same d-dimensional space; relevance is their inner product. Parameters
are kept in float64 so analytic gradients can be validated against central
finite differences; serialization narrows to float32 at the boundary.

A forward call can return its activation cache, which backward() consumes
to accumulate exact gradients into a GradientBuffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .corpus import SEP, Passage

QUESTION = "question"
PASSAGE = "passage"

DROPOUT_RATE = 0.1


class EncoderError(Exception):
    """Invalid encoder input (empty sequence, id out of range, bad shapes)."""


@dataclass
class SideParams:
    """One encoder side: token table plus a two-layer projection head."""

    emb: np.ndarray  # (V, d_emb)
    w1: np.ndarray  # (d_emb, d_h)
    b1: np.ndarray  # (d_h,)
    w2: np.ndarray  # (d_h, d)
    b2: np.ndarray  # (d,)

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [("emb", self.emb), ("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def copy(self) -> "SideParams":
        return SideParams(*(a.copy() for _, a in self.arrays()))


@dataclass
class EncoderParams:
    """Both sides of the dual encoder. The sides share no arrays."""

    question: SideParams
    passage: SideParams

    @property
    def vocab_size(self) -> int:
        return self.question.emb.shape[0]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        v, d_emb = self.question.emb.shape
        d_h, d = self.question.w2.shape
        return v, d_emb, d_h, d

    def side(self, side: str) -> SideParams:
        if side == QUESTION:
            return self.question
        if side == PASSAGE:
            return self.passage
        raise EncoderError(f"unknown side {side!r}")

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """Canonical flat ordering shared with GradientBuffer and Adam state."""
        out = [(f"question.{n}", a) for n, a in self.question.arrays()]
        out += [(f"passage.{n}", a) for n, a in self.passage.arrays()]
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.question.copy(), self.passage.copy())


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(vocab_size: int, d_emb: int, d_h: int, d: int, seed: int) -> EncoderParams:
    """Seeded init: uniform(-0.1, 0.1) token tables, Glorot projections, zero
    biases. The two sides draw independently so their token geometries differ
    from the start.
    """
    rng = np.random.default_rng(seed)

    def one_side() -> SideParams:
        return SideParams(
            emb=rng.uniform(-0.1, 0.1, size=(vocab_size, d_emb)),
            w1=_glorot(rng, d_emb, d_h),
            b1=np.zeros(d_h),
            w2=_glorot(rng, d_h, d),
            b2=np.zeros(d),
        )

    return EncoderParams(question=one_side(), passage=one_side())


@dataclass
class GradientBuffer:
    """Gradient accumulator, shape-congruent with EncoderParams."""

    question: SideParams
    passage: SideParams

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "GradientBuffer":
        def z(side: SideParams) -> SideParams:
            return SideParams(*(np.zeros_like(a) for _, a in side.arrays()))

        return cls(question=z(params.question), passage=z(params.passage))

    def side(self, side: str) -> SideParams:
        return self.question if side == QUESTION else self.passage

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"question.{n}", a) for n, a in self.question.arrays()]
        out += [(f"passage.{n}", a) for n, a in self.passage.arrays()]
        return out

    def zero_(self) -> None:
        for _, a in self.arrays():
            a[...] = 0.0

    def add_(self, other: "GradientBuffer") -> None:
        for (_, mine), (_, theirs) in zip(self.arrays(), other.arrays()):
            mine += theirs

    def scale_(self, factor: float) -> None:
        for _, a in self.arrays():
            a *= factor

    def global_norm(self) -> float:
        total = 0.0
        for _, a in self.arrays():
            total += float(np.dot(a.ravel(), a.ravel()))
        return float(np.sqrt(total))


def passage_input_ids(passage: Passage) -> np.ndarray:
    """Encoder input for a passage: title tokens, a separator, text tokens."""
    return np.asarray(list(passage.title_tokens) + [SEP] + list(passage.text_tokens), dtype=np.int64)


@dataclass
class ForwardCache:
    """Activations saved by forward() for exact backprop."""

    tokens: np.ndarray
    side: str
    pooled: np.ndarray  # mean of token embeddings, pre-dropout
    mask: np.ndarray | None  # inverted dropout mask, None in eval mode
    dropped: np.ndarray  # pooled after dropout (== pooled in eval mode)
    hidden: np.ndarray  # tanh activations
    output: np.ndarray


def forward(
    tokens,
    side: str,
    params: EncoderParams,
    train_mode: bool = False,
    seed: int = 0,
    dropout_rate: float = DROPOUT_RATE,
) -> tuple[np.ndarray, ForwardCache]:
    """Encode a token sequence and keep the activation cache.

    In train_mode an inverted dropout mask is applied to the pooled vector,
    drawn from a generator seeded with `seed` so the same (input, seed)
    pair always produces the same output.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise EncoderError(f"cannot encode an empty token sequence (side={side})")
    p = params.side(side)
    if ids.min() < 0 or ids.max() >= p.emb.shape[0]:
        raise EncoderError(
            f"token id out of range [0, {p.emb.shape[0]}): {ids.min()}..{ids.max()}"
        )
    if not 0.0 <= dropout_rate < 1.0:
        raise EncoderError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    pooled = kernels.bag_mean(p.emb, ids)
    if train_mode and dropout_rate > 0.0:
        rng = np.random.default_rng(seed)
        keep = rng.random(pooled.shape[0]) >= dropout_rate
        mask = keep.astype(np.float64) / (1.0 - dropout_rate)
        dropped = pooled * mask
    else:
        mask = None
        dropped = pooled
    hidden = np.tanh(dropped @ p.w1 + p.b1)
    output = hidden @ p.w2 + p.b2
    cache = ForwardCache(
        tokens=ids, side=side, pooled=pooled, mask=mask, dropped=dropped, hidden=hidden, output=output
    )
    return output, cache


def encode(
    tokens,
    side: str,
    params: EncoderParams,
    train_mode: bool = False,
    seed: int = 0,
    dropout_rate: float = DROPOUT_RATE,
) -> np.ndarray:
    return forward(tokens, side, params, train_mode=train_mode, seed=seed, dropout_rate=dropout_rate)[0]


def pack_bags(bags) -> tuple[np.ndarray, np.ndarray]:
    """CSR-pack variable-length token sequences: (flat ids, bag offsets)."""
    offsets = np.zeros(len(bags) + 1, dtype=np.int64)
    for i, bag in enumerate(bags):
        offsets[i + 1] = offsets[i] + len(bag)
    flat = np.empty(int(offsets[-1]), dtype=np.int64)
    for i, bag in enumerate(bags):
        flat[offsets[i] : offsets[i + 1]] = bag
    return flat, offsets


@dataclass
class BatchCache:
    """Activations saved by forward_batch() for exact backprop, one batch."""

    flat_ids: np.ndarray
    offsets: np.ndarray  # (n_bags + 1,), bag i spans flat_ids[offsets[i]:offsets[i+1]]
    side: str
    masks: np.ndarray | None  # (n_bags, d_emb) inverted dropout, None in eval mode
    dropped: np.ndarray  # pooled after dropout (== pooled in eval mode)
    hidden: np.ndarray  # tanh activations, (n_bags, d_h)


def forward_batch(
    bags,
    side: str,
    params: EncoderParams,
    train_mode: bool = False,
    seeds=None,
    dropout_rate: float = DROPOUT_RATE,
) -> tuple[np.ndarray, BatchCache]:
    """Encode many token sequences in one pass; same math as forward().

    In train_mode each bag gets its own dropout mask drawn from seeds[i],
    matching forward(bag, seed=seeds[i]) exactly.
    """
    if len(bags) == 0:
        raise EncoderError(f"cannot encode an empty batch (side={side})")
    p = params.side(side)
    flat, offsets = pack_bags(bags)
    if (np.diff(offsets) == 0).any():
        raise EncoderError(f"cannot encode an empty token sequence (side={side})")
    if flat.min() < 0 or flat.max() >= p.emb.shape[0]:
        raise EncoderError(
            f"token id out of range [0, {p.emb.shape[0]}): {flat.min()}..{flat.max()}"
        )
    if not 0.0 <= dropout_rate < 1.0:
        raise EncoderError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    pooled = kernels.bag_mean_batch(p.emb, flat, offsets)
    if train_mode and dropout_rate > 0.0:
        if seeds is None or len(seeds) != len(bags):
            raise EncoderError("train-mode batch encode needs one dropout seed per bag")
        masks = np.empty_like(pooled)
        for i, seed in enumerate(seeds):
            keep = np.random.default_rng(seed).random(pooled.shape[1]) >= dropout_rate
            masks[i] = keep.astype(np.float64) / (1.0 - dropout_rate)
        dropped = pooled * masks
    else:
        masks = None
        dropped = pooled
    hidden = np.tanh(dropped @ p.w1 + p.b1)
    outputs = hidden @ p.w2 + p.b2
    cache = BatchCache(
        flat_ids=flat, offsets=offsets, side=side, masks=masks, dropped=dropped, hidden=hidden
    )
    return outputs, cache


def backward_batch(
    cache: BatchCache,
    params: EncoderParams,
    upstream_grads: np.ndarray,
    grads: GradientBuffer,
) -> GradientBuffer:
    """Accumulate parameter gradients for a whole forward_batch() at once."""
    p = params.side(cache.side)
    g = grads.side(cache.side)
    up = np.asarray(upstream_grads, dtype=np.float64)
    n_bags = cache.offsets.shape[0] - 1
    if up.shape != (n_bags, p.b2.shape[0]):
        raise EncoderError(
            f"upstream gradient shape {up.shape} != ({n_bags}, {p.b2.shape[0]})"
        )
    g.b2 += up.sum(axis=0)
    g.w2 += cache.hidden.T @ up
    d_hidden = up @ p.w2.T
    d_pre = d_hidden * (1.0 - cache.hidden**2)
    g.b1 += d_pre.sum(axis=0)
    g.w1 += cache.dropped.T @ d_pre
    d_dropped = d_pre @ p.w1.T
    d_pooled = d_dropped * cache.masks if cache.masks is not None else d_dropped
    kernels.scatter_mean_bags(g.emb, cache.flat_ids, cache.offsets, d_pooled)
    return grads


def score_pair(q_emb: np.ndarray, p_emb: np.ndarray) -> float:
    if q_emb.shape != p_emb.shape:
        raise EncoderError(f"embedding dimension mismatch: {q_emb.shape} vs {p_emb.shape}")
    return float(np.dot(q_emb, p_emb))


def backward(
    cache: ForwardCache | None,
    params: EncoderParams,
    upstream_grad: np.ndarray,
    grads: GradientBuffer,
) -> GradientBuffer:
    """Accumulate d(loss)/d(params) given d(loss)/d(embedding).

    Exact reverse pass of forward(): affine, tanh, affine, dropout mask,
    then the mean pool scatters evenly over the input token rows.
    """
    if cache is None:
        raise EncoderError("backward called without a forward cache")
    p = params.side(cache.side)
    g = grads.side(cache.side)
    up = np.asarray(upstream_grad, dtype=np.float64)
    if up.shape != cache.output.shape:
        raise EncoderError(f"upstream gradient shape {up.shape} != output shape {cache.output.shape}")

    g.b2 += up
    g.w2 += np.outer(cache.hidden, up)
    d_hidden = p.w2 @ up
    d_pre = d_hidden * (1.0 - cache.hidden**2)
    g.b1 += d_pre
    g.w1 += np.outer(cache.dropped, d_pre)
    d_dropped = p.w1 @ d_pre
    d_pooled = d_dropped * cache.mask if cache.mask is not None else d_dropped
    kernels.scatter_add(g.emb, cache.tokens, d_pooled / cache.tokens.shape[0])
    return grads
