"""Index tests: sharding rule, exact-search oracle, refresh, persistence."""

import threading

import numpy as np
import pytest

from distilret.corpus import Vocabulary, make_passage
from distilret.encoder import PASSAGE, encode, init_params, passage_input_ids
from distilret.index import (
    EmbeddingIndex,
    IndexHandle,
    IndexingError,
    Shard,
    build,
    from_matrix,
    load_index,
    refresh,
    save_index,
    search,
    shard_sizes,
)

from oracles import brute_force_topk


@pytest.fixture
def small_corpus():
    vocab = Vocabulary(tokens=tuple(f"w{i}" for i in range(20)))
    passages = [
        make_passage(f"p{i}", f"w{i % 5}", " ".join(f"w{(i + j) % 20}" for j in range(6)), vocab)
        for i in range(10)
    ]
    return vocab, passages


class TestSharding:
    def test_largest_remainder_10_over_3(self):
        assert shard_sizes(10, 3) == [4, 3, 3]

    def test_even_split(self):
        assert shard_sizes(8, 4) == [2, 2, 2, 2]

    def test_single_shard_covers_all(self, small_corpus):
        _, passages = small_corpus
        params = init_params(24, 6, 5, 4, seed=0)
        idx = build(passages, params, num_shards=1)
        assert len(idx.shards) == 1
        assert idx.shards[0].start == 0 and idx.shards[0].count == 10

    def test_ranges_partition_corpus(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = int(rng.integers(1, 50))
            n = int(rng.integers(1, 9))
            sizes = shard_sizes(m, n)
            assert sum(sizes) == m
            assert max(sizes) - min(sizes) <= 1


class TestBuild:
    def test_rows_in_corpus_order_version_1(self, small_corpus):
        _, passages = small_corpus
        params = init_params(24, 6, 5, 4, seed=0)
        idx = build(passages, params, num_shards=3)
        assert idx.version == 1
        assert [s.count for s in idx.shards] == [4, 3, 3]
        for r, passage in enumerate(passages):
            fresh = encode(passage_input_ids(passage), PASSAGE, params)
            assert np.allclose(idx.row(r), fresh, atol=1e-6)

    def test_rebuild_bitwise_identical(self, small_corpus):
        _, passages = small_corpus
        params = init_params(24, 6, 5, 4, seed=0)
        a = build(passages, params, num_shards=3)
        b = build(passages, params, num_shards=3)
        assert np.array_equal(a.matrix(), b.matrix())

    def test_empty_corpus_rejected(self):
        with pytest.raises(IndexingError):
            build([], init_params(5, 4, 4, 2, seed=0), num_shards=1)

    def test_nonfinite_rows_rejected(self):
        mat = np.ones((3, 2), dtype=np.float32)
        mat[1, 0] = np.nan
        with pytest.raises(IndexingError, match="finite"):
            from_matrix(mat, 1)


class TestSearch:
    def test_tie_broken_by_ascending_index(self):
        idx = from_matrix(np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float32), 1)
        result = search(np.array([1.0, 0.0]), 2, idx)
        assert result.pairs() == [(0, 1.0), (2, 1.0)]

    def test_zero_query_returns_first_k(self):
        idx = from_matrix(np.random.default_rng(0).normal(size=(8, 3)).astype(np.float32), 2)
        result = search(np.zeros(3), 4, idx)
        assert result.indices.tolist() == [0, 1, 2, 3]
        assert np.array_equal(result.scores, np.zeros(4))

    def test_k_bounds(self):
        idx = from_matrix(np.ones((4, 2), dtype=np.float32), 1)
        with pytest.raises(IndexingError):
            search(np.ones(2), 5, idx)
        with pytest.raises(IndexingError):
            search(np.ones(2), 0, idx)

    def test_query_dim_checked(self):
        idx = from_matrix(np.ones((4, 2), dtype=np.float32), 1)
        with pytest.raises(IndexingError, match="dim"):
            search(np.ones(3), 1, idx)

    def test_sharded_equals_brute_force(self):
        # Oracle: single-pass float64 scan, sorted by (score desc, index asc).
        rng = np.random.default_rng(123)
        rows = rng.normal(size=(1000, 16)).astype(np.float32)
        queries = rng.normal(size=(100, 16))
        for num_shards in (1, 2, 4, 7):
            idx = from_matrix(rows, num_shards)
            for q in queries:
                got = search(q, 32, idx)
                want_idx, want_scr = brute_force_topk(rows, q, 32)
                assert got.indices.tolist() == want_idx.tolist()
                assert np.abs(got.scores - want_scr).max() < 1e-6

    def test_more_shards_than_rows(self):
        rows = np.eye(3, dtype=np.float32)
        idx = from_matrix(rows, 7)
        result = search(np.array([0.0, 1.0, 0.0]), 2, idx)
        assert result.indices.tolist() == [1, 0]


class TestRefresh:
    def test_noop_refresh_keeps_matrices(self, small_corpus):
        _, passages = small_corpus
        params = init_params(24, 6, 5, 4, seed=0)
        v1 = build(passages, params, num_shards=2)
        v2 = refresh(passages, params, v1)
        assert v2.version == 2
        assert np.array_equal(v1.matrix(), v2.matrix())

    def test_version_sequence(self, small_corpus):
        _, passages = small_corpus
        params = init_params(24, 6, 5, 4, seed=0)
        idx = build(passages, params, num_shards=2)
        versions = [idx.version]
        for _ in range(3):
            idx = refresh(passages, params, idx)
            versions.append(idx.version)
        assert versions == [1, 2, 3, 4]

    def test_staleness_bound_after_refresh(self, small_corpus):
        _, passages = small_corpus
        params = init_params(24, 6, 5, 4, seed=0)
        idx = build(passages, params, num_shards=3)
        params.passage.w2 += 0.01
        params.passage.emb -= 0.003
        idx = refresh(passages, params, idx)
        for r, passage in enumerate(passages):
            fresh = encode(passage_input_ids(passage), PASSAGE, params)
            assert np.abs(idx.row(r) - fresh).max() < 1e-6


class TestHandle:
    def test_publish_requires_newer_version(self):
        mat = np.ones((2, 2), dtype=np.float32)
        handle = IndexHandle(from_matrix(mat, 1, version=1))
        with pytest.raises(IndexingError):
            handle.publish(from_matrix(mat, 1, version=1))
        handle.publish(from_matrix(mat, 1, version=2))
        assert handle.snapshot().version == 2

    def test_readers_never_see_mixed_versions(self):
        # Each version's rows all hold the version number; a reader snapshot
        # must be internally uniform even while the writer keeps publishing.
        def index_of(version):
            mat = np.full((12, 4), float(version), dtype=np.float32)
            return from_matrix(mat, 3, version=version)

        handle = IndexHandle(index_of(1))
        stop = threading.Event()
        bad = []

        def reader():
            while not stop.is_set():
                snap = handle.snapshot()
                values = {float(v) for s in snap.shards for v in np.unique(s.rows)}
                if len(values) != 1 or values != {float(snap.version)}:
                    bad.append(values)

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for t in threads:
            t.start()
        for version in range(2, 60):
            handle.publish(index_of(version))
        stop.set()
        for t in threads:
            t.join()
        assert not bad


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        idx = from_matrix(rng.normal(size=(11, 6)).astype(np.float32), 3, version=4)
        path = tmp_path / "index.bin"
        save_index(idx, path)
        loaded = load_index(path)
        assert loaded.version == 4
        assert loaded.dim == 6 and loaded.m == 11
        assert [(s.start, s.count) for s in loaded.shards] == [(s.start, s.count) for s in idx.shards]
        assert np.array_equal(loaded.matrix(), idx.matrix())

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPExxxxxxxxxxxx")
        with pytest.raises(IndexingError, match="magic"):
            load_index(path)

    def test_wrong_format_version_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        idx = from_matrix(rng.normal(size=(3, 2)).astype(np.float32), 1)
        path = tmp_path / "index.bin"
        save_index(idx, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(IndexingError, match="format version"):
            load_index(path)
