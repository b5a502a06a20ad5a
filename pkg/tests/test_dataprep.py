import json

import numpy as np
import pytest

from routekit import dataprep, simx
from routekit.dataprep import (PredictionRecord, Query, SoftLabelRow,
                               best_expert_label, build_prediction_dataset,
                               build_soft_label_rows, build_training_set,
                               ingest_dataset, ingest_dataset_with_report,
                               sample_weights, soft_labels, stratified_split)
from routekit.embed import HashEmbedder, cosine
from routekit.errors import AdaptorError, DataError

from conftest import make_fleet


def write_corpus(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row + "\n")


def record(qid="q1", expert="a", sim=0.5, nll=1.0, secs=1.0, tin=10, tout=20):
    return PredictionRecord(query_id=qid, expert_name=expert, nll=nll,
                            bert_sim=sim, inference_seconds=secs,
                            input_tokens=tin, output_tokens=tout,
                            response_text="r")


class TestIngest:
    def test_well_formed_in_order(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_corpus(path, [
            json.dumps({"id": f"q{i}", "instruction": f"text {i}", "reference": "ref"})
            for i in range(3)])
        queries = ingest_dataset(path, "demo")
        assert [q.id for q in queries] == ["q0", "q1", "q2"]
        assert all(q.dataset_tag == "demo" for q in queries)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text("")
        queries, skipped = ingest_dataset_with_report(path, "demo")
        assert queries == [] and skipped == []

    def test_malformed_line_reported_with_number(self, tmp_path):
        path = tmp_path / "c.jsonl"
        good = json.dumps({"id": "q", "instruction": "t", "reference": "r"})
        write_corpus(path, [
            good.replace("q", "q1"),
            "{not json",
            good.replace("q", "q3"),
            good.replace("q", "q4"),
        ])
        queries, skipped = ingest_dataset_with_report(path, "demo")
        assert [q.id for q in queries] == ["q1", "q3", "q4"]
        assert len(skipped) == 1 and skipped[0].line_number == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            ingest_dataset(tmp_path / "missing.jsonl", "demo")

    def test_duplicate_id_skipped(self, tmp_path):
        path = tmp_path / "c.jsonl"
        row = json.dumps({"id": "dup", "instruction": "t", "reference": "r"})
        write_corpus(path, [row, row])
        queries, skipped = ingest_dataset_with_report(path, "demo")
        assert len(queries) == 1 and len(skipped) == 1


class TestSoftLabels:
    def test_symmetric_scores(self):
        probs = soft_labels(np.array([0.5, 0.5, 0.5]), temperature=10)
        assert np.allclose(probs, 1 / 3, atol=1e-12)

    def test_derived_two_score_case(self):
        # independent high-precision oracle: exp(.08)/(exp(.08)+exp(.06))
        probs = soft_labels(np.array([0.8, 0.6]), temperature=10)
        assert probs[0] == pytest.approx(0.50500, abs=1e-5)
        assert probs[1] == pytest.approx(0.49500, abs=1e-5)
        assert probs[0] == pytest.approx(0.504999833339999730, abs=1e-12)

    def test_tiny_temperature_near_one_hot(self):
        probs = soft_labels(np.array([0.9, 0.1]), temperature=0.001)
        assert probs[0] > 0.999999

    def test_properties_over_random_vectors(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            scores = rng.uniform(-5, 5, size=rng.integers(2, 9))
            probs = soft_labels(scores, temperature=10)
            assert abs(probs.sum() - 1.0) < 1e-9
            assert probs.argmax() == scores.argmax()
            assert np.all(probs > 0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            scores = rng.uniform(-2, 2, size=5)
            c = float(rng.uniform(-100, 100))
            assert np.allclose(soft_labels(scores + c, 10), soft_labels(scores, 10),
                               atol=1e-9)

    def test_temperature_flattens(self):
        scores = np.array([0.9, 0.3, 0.1])
        spreads = [float(np.ptp(soft_labels(scores, t)))
                   for t in (0.5, 1, 2, 5, 10, 50, 200)]
        assert all(a > b for a, b in zip(spreads, spreads[1:]))
        assert spreads[-1] < 0.01

    def test_errors(self):
        with pytest.raises(DataError):
            soft_labels(np.array([np.nan, 1.0]), 10)
        with pytest.raises(DataError):
            soft_labels(np.array([1.0]), 0.0)


class TestStratifiedSplit:
    @staticmethod
    def queries(tag, n):
        return [Query(id=f"{tag}-{i}", text="t", reference="r", dataset_tag=tag)
                for i in range(n)]

    def test_eight_two(self):
        split = stratified_split(self.queries("a", 10), 0.8, seed=42)
        assert len(split.train) == 8 and len(split.test) == 2

    def test_per_tag_stratification(self):
        qs = self.queries("a", 10) + self.queries("b", 10)
        split = stratified_split(qs, 0.8, seed=42)
        for tag in ("a", "b"):
            assert sum(q.dataset_tag == tag for q in split.train) == 8
            assert sum(q.dataset_tag == tag for q in split.test) == 2

    def test_deterministic(self):
        qs = self.queries("a", 25) + self.queries("b", 13)
        s1 = stratified_split(qs, 0.8, seed=123)
        s2 = stratified_split(qs, 0.8, seed=123)
        assert [q.id for q in s1.train] == [q.id for q in s2.train]
        assert [q.id for q in s1.test] == [q.id for q in s2.test]

    def test_disjoint(self):
        split = stratified_split(self.queries("a", 50), 0.8, seed=1)
        assert not {q.id for q in split.train} & {q.id for q in split.test}

    def test_single_record_tag_reported(self, caplog):
        with caplog.at_level("WARNING"):
            split = stratified_split(self.queries("solo", 1), 0.8, seed=1)
        assert len(split.train) == 1 and not split.test
        assert any("cannot stratify" in m for m in caplog.messages)

    def test_bad_fraction(self):
        with pytest.raises(DataError):
            stratified_split(self.queries("a", 4), 1.0, seed=1)


class TestSampleWeights:
    def test_hand_arithmetic_case(self):
        # counts (10, 30, 60): raw (10, 10/3, 5/3), normalized by 15
        w = sample_weights({"a": 10, "b": 30, "c": 60}).per_class
        assert w["a"] == pytest.approx(2 / 3, abs=1e-9)
        assert w["b"] == pytest.approx(2 / 9, abs=1e-9)
        assert w["c"] == pytest.approx(1 / 9, abs=1e-9)
        assert sum(w.values()) == pytest.approx(1.0, abs=1e-9)

    def test_equal_counts(self):
        w = sample_weights({"a": 5, "b": 5}).per_class
        assert w == {"a": 0.5, "b": 0.5}

    def test_single_class(self):
        assert sample_weights({"only": 7}).per_class == {"only": 1.0}

    def test_zero_count_rejected(self):
        with pytest.raises(DataError):
            sample_weights({"a": 3, "b": 0})

    def test_inverse_ordering(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            counts = {f"c{i}": int(rng.integers(1, 100)) for i in range(4)}
            w = sample_weights(counts).per_class
            for a in counts:
                for b in counts:
                    if counts[a] < counts[b]:
                        assert w[a] > w[b]
            assert sum(w.values()) == pytest.approx(1.0, abs=1e-9)


class TestBestExpertLabel:
    def test_argmax(self):
        records = [record(expert="a", sim=0.7), record(expert="b", sim=0.9),
                   record(expert="c", sim=0.8)]
        assert best_expert_label(records) == "b"

    def test_tie_breaks_lexicographically(self):
        records = [record(expert="b", sim=0.9), record(expert="a", sim=0.9)]
        assert best_expert_label(records) == "a"

    def test_single(self):
        assert best_expert_label([record(expert="c", sim=0.2)]) == "c"

    def test_empty(self):
        with pytest.raises(DataError):
            best_expert_label([])


class _FailingAdaptor:
    name = "broken"

    def generate(self, prompt, params, query=None):
        raise AdaptorError("always down", expert_name=self.name)


class TestBuildPredictionDataset:
    @pytest.fixture()
    def two_queries(self):
        return [Query(id="q1", text="alpha beta", reference="alpha beta gamma",
                      dataset_tag="science"),
                Query(id="q2", text="gamma delta", reference="delta answer words",
                      dataset_tag="science")]

    def test_cardinality(self, two_queries):
        fleet = make_fleet({f"e{i}": {"science": 0.5} for i in range(3)})
        adaptors = {n: simx.SimulatedExpert(c) for n, c in fleet.items()}
        records = build_prediction_dataset(two_queries, adaptors, HashEmbedder(32))
        assert len(records) == 6
        assert [(r.query_id, r.expert_name) for r in records] == sorted(
            (r.query_id, r.expert_name) for r in records)

    def test_verbatim_expert_similarity_one(self, two_queries):
        fleet = make_fleet({"perfect": {"science": 1.0}})
        adaptors = {"perfect": simx.SimulatedExpert(fleet["perfect"])}
        records = build_prediction_dataset(two_queries, adaptors, HashEmbedder(32))
        for rec in records:
            assert rec.bert_sim == pytest.approx(1.0, abs=1e-9)

    def test_reads_back_simulator_config(self, two_queries):
        fleet = make_fleet({"fixed": {"science": 0.5}},
                           base_latency=0.5, jitter=0.0,
                           tokens_mean=100, tokens_spread=0)
        adaptors = {"fixed": simx.SimulatedExpert(fleet["fixed"])}
        records = build_prediction_dataset(two_queries, adaptors, HashEmbedder(32))
        for rec in records:
            assert rec.output_tokens == 100
            assert rec.inference_seconds == pytest.approx(0.5, rel=1e-12)

    def test_failures_omitted_and_logged(self, two_queries, caplog):
        fleet = make_fleet({"ok": {"science": 0.5}})
        adaptors = {"ok": simx.SimulatedExpert(fleet["ok"]), "broken": _FailingAdaptor()}
        with caplog.at_level("WARNING"):
            records = build_prediction_dataset(two_queries, adaptors, HashEmbedder(32))
        assert {r.expert_name for r in records} == {"ok"}
        assert any("broken" in m for m in caplog.messages)

    def test_all_experts_failed_flagged(self, two_queries, caplog):
        with caplog.at_level("WARNING"):
            records = build_prediction_dataset(
                two_queries, {"broken": _FailingAdaptor()}, HashEmbedder(32))
        assert records == []
        assert any("every expert" in m for m in caplog.messages)

    def test_concurrent_dispatch_matches_sequential(self, two_queries):
        fleet = make_fleet({f"e{i}": {"science": 0.1 * i} for i in range(4)})
        adaptors = {n: simx.SimulatedExpert(c) for n, c in fleet.items()}
        seq = build_prediction_dataset(two_queries, adaptors, HashEmbedder(32))
        par = build_prediction_dataset(two_queries, adaptors, HashEmbedder(32),
                                       max_workers=4)
        assert seq == par

    def test_similarity_matches_independent_cosine(self, two_queries):
        fleet = make_fleet({"e": {"science": 0.4}})
        adaptors = {"e": simx.SimulatedExpert(fleet["e"])}
        emb = HashEmbedder(32)
        records = build_prediction_dataset(two_queries, adaptors, emb)
        for rec in records:
            query = next(q for q in two_queries if q.id == rec.query_id)
            expected = cosine(emb.embed(query.reference), emb.embed(rec.response_text))
            assert rec.bert_sim == expected  # bit-for-bit

    def test_no_adaptors(self, two_queries):
        with pytest.raises(DataError):
            build_prediction_dataset(two_queries, {}, HashEmbedder(32))


class TestSoftLabelRows:
    def test_excludes_incomplete_queries(self):
        records = [record(qid="q1", expert="a"), record(qid="q1", expert="b"),
                   record(qid="q2", expert="a")]
        rows, excluded = build_soft_label_rows(records, ["a", "b"])
        assert [r.query_id for r in rows] == ["q1"]
        assert excluded == ["q2"]
        assert set(rows[0].probs) == {"a", "b"}

    def test_nll_metric_negated(self):
        records = [record(qid="q", expert="good", sim=0.1, nll=0.5),
                   record(qid="q", expert="bad", sim=0.9, nll=3.0)]
        rows, _ = build_soft_label_rows(records, ["good", "bad"], metric="nll")
        assert rows[0].probs["good"] > rows[0].probs["bad"]

    def test_probs_sum_validated(self):
        with pytest.raises(DataError):
            SoftLabelRow(query_id="q", probs={"a": 0.6, "b": 0.6})


class TestTrainingSet:
    def test_weights_attached_by_best_class(self):
        queries = [Query(id=f"q{i}", text="t", reference="r", dataset_tag="d")
                   for i in range(4)]
        rows = [SoftLabelRow(query_id=f"q{i}", probs={"a": 0.6, "b": 0.4})
                for i in range(4)]
        best = {"q0": "a", "q1": "a", "q2": "a", "q3": "b"}
        ts = build_training_set(queries, rows, best)
        weights = sample_weights({"a": 3, "b": 1}).per_class
        assert ts.rows[0].weight == weights["a"]
        assert ts.rows[3].weight == weights["b"]
        assert ts.expert_names == ["a", "b"]

    def test_uniform_counts_degenerate_to_equal_weights(self):
        queries = [Query(id=f"q{i}", text="t", reference="r", dataset_tag="d")
                   for i in range(4)]
        rows = [SoftLabelRow(query_id=f"q{i}", probs={"a": 0.5, "b": 0.5})
                for i in range(4)]
        best = {"q0": "a", "q1": "b", "q2": "a", "q3": "b"}
        ts = build_training_set(queries, rows, best)
        assert len({row.weight for row in ts.rows}) == 1


class TestFileRoundTrips:
    def test_queries(self, tmp_path):
        queries = [Query(id="q1", text="hello", reference="world", dataset_tag="t")]
        dataprep.write_queries(queries, tmp_path / "q.jsonl")
        assert dataprep.read_queries(tmp_path / "q.jsonl") == queries

    def test_prediction_records_lossless(self, tmp_path):
        records = [record(sim=0.123456789012345, secs=0.3333333333333333),
                   record(qid="q2", nll=None)]
        dataprep.write_prediction_records(records, tmp_path / "p.jsonl")
        assert dataprep.read_prediction_records(tmp_path / "p.jsonl") == records

    def test_soft_labels(self, tmp_path):
        rows = [SoftLabelRow(query_id="q", probs={"a": 0.25, "b": 0.75})]
        dataprep.write_soft_labels(rows, tmp_path / "s.jsonl")
        assert dataprep.read_soft_labels(tmp_path / "s.jsonl") == rows

    def test_split(self, tmp_path):
        queries = [Query(id=f"q{i}", text="t", reference="r", dataset_tag="d")
                   for i in range(10)]
        split = stratified_split(queries, 0.8, 42)
        dataprep.write_split(split, tmp_path / "split.json")
        loaded = dataprep.read_split(tmp_path / "split.json", queries)
        assert loaded == split
