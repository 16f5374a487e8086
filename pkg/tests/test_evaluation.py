"""Evaluation tests: span matching, accuracy/recall/nDCG oracles, BM25."""

import json
import math

import numpy as np
import pytest

from distilret.corpus import Vocabulary, make_passage
from distilret.evaluation import (
    BM25Index,
    EvalError,
    QrelSet,
    RetrievalRun,
    bm25_rank,
    contains_answer,
    emit_report,
    ndcg_at_10,
    recall_at_k,
    topk_accuracy,
)

VOCAB = Vocabulary(tokens=tuple(f"w{i}" for i in range(60)) + ("arlington", "texas", "bowling"))


def passage(pid, text, title=""):
    return make_passage(pid, title, text, VOCAB)


class TestContainsAnswer:
    def test_positive_span(self):
        p = passage("p1", "the venue is located in Arlington, Texas since 1993")
        assert contains_answer(p, ["Arlington"])

    def test_case_and_punctuation_normalized(self):
        p = passage("p1", "Arlington,")
        assert contains_answer(p, ["arlington"])

    def test_substring_of_a_word_does_not_match(self):
        p = passage("p1", "Arlington")
        assert not contains_answer(p, ["ton"])

    def test_multiword_answer_must_be_contiguous(self):
        p = passage("p1", "bowling in Arlington near Texas")
        assert contains_answer(p, ["in arlington"])
        assert not contains_answer(p, ["arlington texas"])

    def test_title_excluded(self):
        p = passage("p1", "somewhere else", title="Arlington Texas")
        assert not contains_answer(p, ["Arlington"])

    def test_any_answer_suffices(self):
        p = passage("p1", "bowling hall")
        assert contains_answer(p, ["zzz", "bowling"])

    def test_empty_answer_list_rejected(self):
        with pytest.raises(EvalError):
            contains_answer(passage("p1", "x"), [])


def run_of(rankings):
    run = RetrievalRun()
    for qid, ranking in rankings.items():
        run.add(qid, ranking)
    return run


class TestRetrievalRun:
    def test_rejects_unsorted(self):
        run = RetrievalRun()
        with pytest.raises(EvalError, match="ordered"):
            run.add("q1", [("p1", 0.1), ("p2", 0.9)])

    def test_rejects_duplicates(self):
        run = RetrievalRun()
        with pytest.raises(EvalError, match="duplicate"):
            run.add("q1", [("p1", 0.9), ("p1", 0.1)])

    def test_tie_must_be_id_ascending(self):
        run = RetrievalRun()
        with pytest.raises(EvalError, match="ordered"):
            run.add("q1", [("p2", 0.5), ("p1", 0.5)])
        run.add("q2", [("p1", 0.5), ("p2", 0.5)])

    def test_save_load_roundtrip(self, tmp_path):
        run = run_of({"q1": [("p1", 0.9), ("p2", 0.1)], "q2": [("p3", 1.5)]})
        run.metadata = {"step": 7}
        run.save(tmp_path / "run.jsonl")
        loaded = RetrievalRun.load(tmp_path / "run.jsonl")
        assert loaded.rankings == run.rankings
        assert loaded.metadata == {"step": 7}


class TestTopkAccuracy:
    def corpus(self):
        hit = passage("hit", "contains arlington here")
        miss = [passage(f"m{i}", f"w{i} w{i + 1}") for i in range(60)]
        return {p.id: p for p in [hit] + miss}

    def test_saturation_at_rank_1(self):
        by_id = self.corpus()
        run = run_of({"q1": [("hit", 1.0), ("m1", 0.5)], "q2": [("hit", 2.0), ("m2", 0.4)]})
        qrels = QrelSet(answers={"q1": ("arlington",), "q2": ("arlington",)})
        acc = topk_accuracy(run, qrels, [1, 2], by_id)
        assert acc == {1: 1.0, 2: 1.0}

    def test_floor_when_no_passage_matches(self):
        by_id = self.corpus()
        run = run_of({"q1": [("m1", 1.0), ("m2", 0.5)]})
        qrels = QrelSet(answers={"q1": ("arlington",)})
        acc = topk_accuracy(run, qrels, [1, 2], by_id)
        assert acc == {1: 0.0, 2: 0.0}

    def test_hits_at_ranks_3_and_50(self):
        by_id = self.corpus()
        rank3 = [("m1", 53.0), ("m2", 52.0), ("hit", 51.0)] + [(f"m{i}", 50.0 - i) for i in range(3, 50)]
        rank50 = [(f"m{i}", 100.0 - i) for i in range(1, 50)] + [("hit", 1.0)]
        run = run_of({"q1": rank3, "q2": rank50})
        qrels = QrelSet(answers={"q1": ("arlington",), "q2": ("arlington",)})
        acc = topk_accuracy(run, qrels, [20, 100], by_id)
        assert acc == {20: 0.5, 100: 1.0}

    def test_missing_question_listed(self):
        by_id = self.corpus()
        run = run_of({"q9": [("m1", 1.0)]})
        with pytest.raises(EvalError, match="q9"):
            topk_accuracy(run, QrelSet(answers={"q1": ("x",)}), [1], by_id)

    def test_monotone_in_k_and_matches_naive_scan(self):
        rng = np.random.default_rng(8)
        by_id = self.corpus()
        pids = list(by_id)
        qrels = {}
        run = RetrievalRun()
        for qi in range(12):
            order = rng.permutation(len(pids))
            ranking = [(pids[j], float(len(pids) - pos)) for pos, j in enumerate(order)]
            run.add(f"q{qi}", ranking)
            qrels[f"q{qi}"] = ("arlington",)
        ks = [1, 2, 5, 10, 61]
        acc = topk_accuracy(run, QrelSet(answers=qrels), ks, by_id)
        assert all(acc[a] <= acc[b] for a, b in zip(ks, ks[1:]))
        for k in ks:
            hits = 0
            for qid, ranking in run.rankings.items():
                if any(contains_answer(by_id[pid], qrels[qid]) for pid, _ in ranking[:k]):
                    hits += 1
            assert acc[k] == hits / len(run.rankings)


class TestGradedMetrics:
    def test_ndcg_ideal_rank(self):
        run = run_of({"q1": [("p1", 2.0), ("p2", 1.0)]})
        qrels = QrelSet(graded={"q1": {"p1": 1}})
        assert ndcg_at_10(run, qrels).value == pytest.approx(1.0)

    def test_ndcg_relevant_at_rank_2(self):
        run = run_of({"q1": [("p2", 2.0), ("p1", 1.0)]})
        qrels = QrelSet(graded={"q1": {"p1": 1}})
        assert ndcg_at_10(run, qrels).value == pytest.approx(0.6309, abs=1e-4)

    def test_ndcg_bounded_and_1_only_when_ideal(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            pids = [f"p{i}" for i in range(12)]
            grades = {pid: int(rng.integers(0, 3)) for pid in pids}
            if not any(grades.values()):
                grades[pids[0]] = 1
            order = list(rng.permutation(12))
            ranking = [(pids[j], float(12 - pos)) for pos, j in enumerate(order)]
            run = run_of({"q1": ranking})
            result = ndcg_at_10(run, QrelSet(graded={"q1": grades}))
            assert 0.0 <= result.value <= 1.0 + 1e-12
            top = [grades.get(pid, 0) for pid, _ in ranking[:10]]
            ideal = sorted(grades.values(), reverse=True)[:10]
            assert (result.value == pytest.approx(1.0)) == (top == ideal)

    def test_recall_half(self):
        ranking = [(f"p{i}", float(200 - i)) for i in range(150)]
        run = run_of({"q1": ranking})
        qrels = QrelSet(graded={"q1": {"p5": 1, "p149": 1}})
        assert recall_at_k(run, qrels, 100).value == 0.5

    def test_zero_relevant_excluded_and_counted(self):
        run = run_of({"q1": [("p1", 1.0)], "q2": [("p1", 1.0)]})
        qrels = QrelSet(graded={"q1": {"p1": 1}, "q2": {}})
        result = recall_at_k(run, qrels, 10)
        assert result.value == 1.0
        assert result.evaluated == 1
        assert result.excluded == 1


class TestBM25:
    def test_hand_value_two_docs(self):
        docs = [passage("d1", "w1"), passage("d2", "w2")]
        ranked = bm25_rank(["w1"], docs, k1=0.9, b=0.4, k=2)
        assert ranked[0][0] == "d1"
        assert ranked[0][1] == pytest.approx(math.log(2), abs=1e-12)
        assert ranked[1] == ("d2", 0.0)

    def test_absent_term_scores_all_zero(self):
        docs = [passage("d1", "w1 w2"), passage("d2", "w3")]
        ranked = bm25_rank(["w9"], docs, k=2)
        assert [s for _, s in ranked] == [0.0, 0.0]
        assert [pid for pid, _ in ranked] == ["d1", "d2"]

    def test_tf_monotonicity(self):
        docs = [passage("d1", "w1 w2"), passage("d2", "w1 w1")]
        ranked = dict(bm25_rank(["w1"], docs, k=2))
        assert ranked["d2"] > ranked["d1"]

    def test_title_words_are_indexed(self):
        docs = [passage("d1", "w2", title="w1"), passage("d2", "w3")]
        ranked = bm25_rank(["w1"], docs, k=1)
        assert ranked[0][0] == "d1" and ranked[0][1] > 0

    def test_file_order_invariance(self):
        rng = np.random.default_rng(31)
        docs = [
            passage(f"d{i}", " ".join(f"w{int(rng.integers(0, 20))}" for _ in range(12)))
            for i in range(30)
        ]
        shuffled = [docs[j] for j in rng.permutation(30)]
        for query in (["w1", "w2"], ["w5"], ["w1", "w1", "w3"]):
            a = BM25Index(docs).rank(query, 30)
            b = BM25Index(shuffled).rank(query, 30)
            assert a == b

    def test_tie_break_ascending_pid(self):
        docs = [passage("d2", "w1"), passage("d1", "w1")]
        ranked = bm25_rank(["w1"], docs, k=2)
        assert [pid for pid, _ in ranked] == ["d1", "d2"]

    def test_duplicate_query_terms_weighted(self):
        docs = [passage("d1", "w1 w9"), passage("d2", "w2 w9")]
        single = dict(bm25_rank(["w1", "w2"], docs, k=2))
        doubled = dict(bm25_rank(["w1", "w1", "w2"], docs, k=2))
        assert doubled["d1"] > single["d1"]
        assert doubled["d2"] == pytest.approx(single["d2"])


class TestEmitReport:
    def test_table_column_order(self, tmp_path):
        path = tmp_path / "report.txt"
        emit_report({"Top-20": 0.5, "Top-100": 0.8}, "table", path)
        text = path.read_text()
        header = text.splitlines()[0]
        assert header.index("Top-20") < header.index("Top-100")
        assert "0.5000" in text and "0.8000" in text

    def test_json_roundtrip(self, tmp_path):
        path = tmp_path / "report.json"
        emit_report({"Top-1": 0.25}, "json", path)
        payload = json.loads(path.read_text())
        assert payload["schema_version"] == 1
        assert payload["metrics"] == {"Top-1": 0.25}

    def test_byte_identical_reports(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        emit_report({"Top-1": 1 / 3, "nDCG@10": 0.5}, "json", a)
        emit_report({"Top-1": 1 / 3, "nDCG@10": 0.5}, "json", b)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_format(self, tmp_path):
        with pytest.raises(EvalError):
            emit_report({}, "xml", tmp_path / "r")
