"""Versioned sharded embedding index with exact top-K inner-product search.

Rows are stored as float32 in corpus order, split into contiguous shards by
a largest-remainder rule. Search runs per shard and merges, accumulating
scores in float64, so results match a single brute-force pass bit-for-bit
in ranking and to 1e-6 in score regardless of the shard count.

An index value is immutable once built. Refresh constructs the next version
off to the side; IndexHandle swaps the published reference atomically so a
reader always sees exactly one version.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import kernels
from .encoder import PASSAGE, EncoderParams, encode, forward_batch, passage_input_ids

MAGIC = b"DRIX"
FORMAT_VERSION = 1


class IndexingError(Exception):
    """Invalid index construction, persistence, or search arguments."""


@dataclass(frozen=True)
class Shard:
    start: int
    rows: np.ndarray  # (count, d) float32, row i holds passage start+i

    @property
    def count(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class EmbeddingIndex:
    version: int
    dim: int
    shards: tuple[Shard, ...]

    @property
    def m(self) -> int:
        return sum(s.count for s in self.shards)

    def row(self, i: int) -> np.ndarray:
        for shard in self.shards:
            if shard.start <= i < shard.start + shard.count:
                return shard.rows[i - shard.start]
        raise IndexingError(f"passage index {i} out of range [0, {self.m})")

    def matrix(self) -> np.ndarray:
        return np.concatenate([s.rows for s in self.shards], axis=0)


@dataclass(frozen=True)
class SearchResult:
    indices: np.ndarray  # (K,) int64, distinct
    scores: np.ndarray  # (K,) float64, non-increasing

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.indices, self.scores)]


def shard_sizes(m: int, num_shards: int) -> list[int]:
    """Largest-remainder split: the first m % n shards get one extra row."""
    if num_shards < 1:
        raise IndexingError(f"num_shards must be >= 1, got {num_shards}")
    base, rem = divmod(m, num_shards)
    return [base + 1 if i < rem else base for i in range(num_shards)]


def from_matrix(matrix: np.ndarray, num_shards: int, version: int = 1) -> EmbeddingIndex:
    """Build an index over precomputed embedding rows (corpus order)."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise IndexingError(f"need a non-empty 2-d matrix, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise IndexingError("index rows must be finite")
    shards = []
    start = 0
    for size in shard_sizes(matrix.shape[0], num_shards):
        shards.append(Shard(start=start, rows=matrix[start : start + size]))
        start += size
    return EmbeddingIndex(version=version, dim=matrix.shape[1], shards=tuple(shards))


def _encode_all(passages, params: EncoderParams, chunk: int = 1024) -> np.ndarray:
    rows = np.empty((len(passages), params.dims[3]), dtype=np.float32)
    for lo in range(0, len(passages), chunk):
        part = passages[lo : lo + chunk]
        try:
            out, _ = forward_batch([passage_input_ids(p) for p in part], PASSAGE, params)
            rows[lo : lo + len(part)] = out
        except Exception:
            # re-run one by one so the error names the offending passage
            for i, passage in enumerate(part):
                try:
                    rows[lo + i] = encode(passage_input_ids(passage), PASSAGE, params)
                except Exception as exc:
                    raise IndexingError(f"failed to encode passage {passage.id!r}: {exc}") from exc
    return rows


def build(passages, params: EncoderParams, num_shards: int) -> EmbeddingIndex:
    """Encode every passage in eval mode and shard the rows. version = 1."""
    if not passages:
        raise IndexingError("cannot build an index over zero passages")
    return from_matrix(_encode_all(passages, params), num_shards, version=1)


def refresh(passages, params: EncoderParams, index: EmbeddingIndex) -> EmbeddingIndex:
    """Re-encode all passages under the current parameters; version + 1."""
    return from_matrix(_encode_all(passages, params), len(index.shards), version=index.version + 1)


def search(q_emb: np.ndarray, k: int, index: EmbeddingIndex) -> SearchResult:
    """Exact top-k by inner product over all rows.

    Each shard yields its own top-k; the union is re-ranked by
    (score descending, passage index ascending), which equals a brute-force
    scan because every global top-k row is in its shard's local top-k.
    """
    m = index.m
    if k < 1 or k > m:
        raise IndexingError(f"K must be in [1, {m}], got {k}")
    q = np.ascontiguousarray(q_emb, dtype=np.float64)
    if q.shape != (index.dim,):
        raise IndexingError(f"query dim {q.shape} != index dim ({index.dim},)")
    cand_idx = []
    cand_scr = []
    for shard in index.shards:
        if shard.count == 0:
            continue
        local_idx, local_scr = kernels.topk_dot(shard.rows, q, min(k, shard.count))
        cand_idx.append(local_idx + shard.start)
        cand_scr.append(local_scr)
    indices = np.concatenate(cand_idx)
    scores = np.concatenate(cand_scr)
    order = np.lexsort((indices, -scores))[:k]
    return SearchResult(indices=indices[order], scores=scores[order])


class IndexHandle:
    """Atomically swappable reference to the current published index.

    Readers take a snapshot once per operation and keep using it even if a
    refresh publishes a newer version mid-flight; versions are immutable.
    """

    def __init__(self, index: EmbeddingIndex):
        self._lock = threading.Lock()
        self._index = index

    def snapshot(self) -> EmbeddingIndex:
        with self._lock:
            return self._index

    def publish(self, index: EmbeddingIndex) -> None:
        with self._lock:
            if index.version <= self._index.version:
                raise IndexingError(
                    f"refusing to publish version {index.version} over {self._index.version}"
                )
            self._index = index


def save_index(index: EmbeddingIndex, path) -> None:
    """Binary layout: magic, format version, JSON header, float32 LE rows."""
    header = {
        "format_version": FORMAT_VERSION,
        "version": index.version,
        "m": index.m,
        "dim": index.dim,
        "shard_ranges": [[s.start, s.count] for s in index.shards],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for shard in index.shards:
            fh.write(np.ascontiguousarray(shard.rows, dtype="<f4").tobytes())


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise IndexingError(f"not an index file (bad magic {magic!r})")
        fmt, blob_len = struct.unpack("<IQ", fh.read(12))
        if fmt != FORMAT_VERSION:
            raise IndexingError(f"index format version {fmt}, expected {FORMAT_VERSION}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        dim = header["dim"]
        shards = []
        for start, count in header["shard_ranges"]:
            raw = fh.read(4 * count * dim)
            rows = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
            shards.append(Shard(start=start, rows=rows))
    loaded = EmbeddingIndex(version=header["version"], dim=dim, shards=tuple(shards))
    if loaded.m != header["m"]:
        raise IndexingError(f"row count mismatch: header says {header['m']}, file has {loaded.m}")
    return loaded
