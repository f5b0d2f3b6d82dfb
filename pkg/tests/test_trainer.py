import dataclasses
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TOY_MODEL, TOY_TRAIN, toy_dataset
from corank.model import CoBERT, QueryExample
from corank.tensor import Parameter, snapshot_bytes
from corank.trainer import (Adam, EpochRecord, clip_grad_norm, cv_partitions, cv_split, loss,
                            lr_schedule, make_batches, prepare_examples, read_partitions,
                            score_loss, select_model, to_probability, train, train_cobert,
                            write_partitions)


class TestLoss:
    def test_symmetric_case(self):
        assert loss([0.5, 0.5], [1, 0]).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_perfect_predictions(self):
        assert loss([1.0, 0.0], [1, 0]).item() == 0.0
        assert loss([1 - 1e-15, 1e-15], [1, 0]).item() < 1e-14

    def test_summation_oracle(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.01, 0.99, size=50)
        y = rng.integers(0, 2, size=50)
        expected = -sum(math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y))
        assert abs(loss(p, y).item() - expected) < 1e-12

    def test_padding_ignored(self):
        assert loss([0.5, 0.2], [1, 0], [True, False]).item() == pytest.approx(math.log(2))

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            loss([0.5], [2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
    def test_non_negative(self, pairs):
        p, y = zip(*pairs)
        assert loss(list(p), list(y)).item() >= 0.0


class TestScoreLoss:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-40, 40), st.integers(0, 1)), min_size=1, max_size=20))
    def test_scalar_oracle(self, pairs):
        # -log sigmoid(+-s) with the same 1e-12 floor on the probability
        expect = sum(min(math.log1p(math.exp(-abs(v))) + max(-v if y else v, 0.0),
                         -math.log(1e-12)) for v, y in pairs)
        s, y = zip(*pairs)
        assert score_loss(np.array(s), list(y)).item() == pytest.approx(expect, rel=1e-12,
                                                                           abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-15, 15), st.integers(0, 1)), min_size=1, max_size=20))
    def test_matches_probability_loss(self, pairs):
        # away from saturation, where 1 - sigmoid(s) still has precision
        s, y = zip(*pairs)
        expect = loss(to_probability(np.array(s)), list(y)).item()
        assert score_loss(np.array(s), list(y)).item() == pytest.approx(expect, rel=1e-9)

    def test_saturated_wrong_keeps_gradient(self):
        s = Parameter("s", [-60.0, 60.0])
        score_loss(s, [1, 0]).backward()
        np.testing.assert_allclose(s.grad, [-1.0, 1.0])
        # the probability form floors the same values and loses the gradient
        p = Parameter("p", [-60.0, 60.0])
        loss(to_probability(p), [1, 0]).backward()
        assert np.all(p.grad == 0.0)

    def test_value_floored(self):
        assert score_loss([-60.0], [1]).item() == pytest.approx(-math.log(1e-12))

    def test_padding_ignored(self):
        assert score_loss([0.0, 9.0], [1, 0], [True, False]).item() == pytest.approx(math.log(2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            score_loss([0.0, 1.0], [1])


class TestClipGradNorm:
    def test_rescales_to_bound(self):
        a, b = Parameter("a", [0.0]), Parameter("b", [0.0, 0.0])
        a.grad, b.grad = np.array([3.0]), np.array([0.0, 4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])

    def test_zero_disables(self):
        a = Parameter("a", [0.0])
        a.grad = np.array([30.0])
        assert clip_grad_norm([a], 0.0) == 30.0
        assert a.grad.tolist() == [30.0]

    def test_below_bound_untouched(self):
        a = Parameter("a", [0.0])
        a.grad = np.array([0.5])
        clip_grad_norm([a], 1.0)
        assert a.grad.tolist() == [0.5]


class TestProbability:
    def test_values(self):
        assert to_probability(0.0).item() == 0.5
        assert to_probability(1.0).item() == pytest.approx(0.731059, abs=1e-6)
        assert to_probability(800.0).item() == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-15, 15), st.floats(1e-3, 10))  # away from float64 saturation
    def test_monotone(self, a, gap):
        assert to_probability(a + gap).item() > to_probability(a).item()


class TestSchedule:
    def test_default_schedule(self):
        total = 1000
        w = round(0.1 * total)
        assert lr_schedule(w, total, 3e-6, 0.1) == 3e-6
        assert lr_schedule(0, total, 3e-6, 0.1) == 0.0
        assert abs(lr_schedule((w + total) // 2, total, 3e-6, 0.1) - 1.5e-6) < 1e-15
        assert lr_schedule(total, total, 3e-6, 0.1) == 0.0

    def test_warmup_linear(self):
        assert lr_schedule(5, 100, 1.0, 0.1) == pytest.approx(0.5)

    def test_no_warmup(self):
        assert lr_schedule(0, 10, 2.0, 0.0) == 2.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(11, 10, 1.0, 0.1)


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = Parameter("p", [1.0, -2.0])
        p.grad = np.array([0.3, -5.0])
        Adam([p]).step(0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_skips_frozen(self):
        p = Parameter("p", [1.0], trainable=False)
        assert Adam([p]).params == []


def _example(qid, k, seed=0):
    rng = np.random.default_rng(seed)
    return QueryExample(qid, [f"{qid}-d{i}" for i in range(k)], [None] * k, np.zeros(k),
                        rng.integers(0, 2, size=k).astype(float))


class TestBatches:
    def test_initial_order(self):
        b = make_batches([_example("q", 10)], 4, 1, 2, "initial")
        assert [x.positions for x in b] == [(0, 1, 2, 3), (3, 4, 5, 6), (6, 7, 8, 9)]
        assert b[1].context_ids == ("q-d3",)
        assert b[0].prototype_ids == ("q-d0", "q-d1")

    def test_reversed_order(self):
        b = make_batches([_example("q", 10)], 4, 1, 2, "reversed")
        assert [x.group_index for x in b] == [2, 1, 0]

    def test_shuffled_is_seeded_permutation(self):
        exs = [_example(f"q{i}", 30, i) for i in range(4)]
        a = make_batches(exs, 6, 2, 2, "shuffled", np.random.default_rng(3))
        b = make_batches(exs, 6, 2, 2, "shuffled", np.random.default_rng(3))
        init = make_batches(exs, 6, 2, 2, "initial", np.random.default_rng(3))
        assert [x.key() for x in a] == [x.key() for x in b]
        assert Counter(x.key() for x in a) == Counter(x.key() for x in init)

    def test_per_query_order_kept_when_interleaved(self):
        exs = [_example(f"q{i}", 20, i) for i in range(3)]
        for mode, step in (("initial", 1), ("reversed", -1)):
            out = make_batches(exs, 5, 1, 2, mode, np.random.default_rng(0))
            for ex in exs:
                idx = [b.group_index for b in out if b.query_id == ex.qid]
                assert idx == sorted(idx)[::step]

    def test_coverage(self):
        exs = [_example(f"q{i}", 23, i) for i in range(3)]
        out = make_batches(exs, 6, 2, 2, "shuffled", np.random.default_rng(1))
        seen = {(b.query_id, d) for b in out for d in b.candidate_ids}
        assert seen == {(ex.qid, d) for ex in exs for d in ex.doc_ids}

    def test_labels_padded(self):
        ex = _example("q", 5)
        last = make_batches([ex], 4, 1, 1, "initial")[-1]
        assert last.pad_mask.tolist() == [True, True, False, False]
        assert last.labels[2:].tolist() == [0.0, 0.0]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            make_batches([_example("q", 4)], 2, 0, 1, "sideways")


class TestModelSelection:
    def test_examples(self):
        assert select_model([0.7]) == 1
        assert select_model([0.3, 0.5, 0.4]) == 2
        assert select_model([0.5, 0.5]) == 1

    def test_records(self):
        recs = [EpochRecord(1, 0.1, 0.2), EpochRecord(2, 0.1, 0.6), EpochRecord(3, 0.1, 0.6)]
        assert select_model(recs) == 2


class TestCrossValidation:
    def test_150_queries(self):
        qids = [str(q) for q in range(701, 851)]
        folds = cv_split(qids)
        assert all(len(f.test) == 30 for f in folds)
        tests = [q for f in folds for q in f.test]
        assert sorted(tests) == sorted(qids)
        for f in folds:
            assert not set(f.train) & set(f.valid)
            assert not set(f.train) & set(f.test)
            assert len(f.train) == 90

    def test_minimal(self):
        assert cv_partitions(["a", "b", "c", "d", "e"]) == [["a"], ["b"], ["c"], ["d"], ["e"]]

    def test_seven(self):
        parts = cv_partitions([f"q{i}" for i in range(1, 8)])
        assert [len(p) for p in parts] == [2, 2, 1, 1, 1]
        assert parts[0] == ["q1", "q6"]

    def test_numeric_order(self):
        parts = cv_partitions(["10", "9", "100", "2", "1"])
        assert [p[0] for p in parts] == ["1", "2", "9", "10", "100"]

    def test_validation_is_next_partition(self):
        folds = cv_split([str(i) for i in range(10)])
        assert folds[4].valid == folds[0].test

    def test_duplicates(self):
        with pytest.raises(ValueError):
            cv_partitions(["a", "a", "b", "c", "d"])

    def test_file_mode(self, tmp_path):
        parts = cv_partitions([str(i) for i in range(12)])
        write_partitions(parts, tmp_path / "p.tsv")
        assert read_partitions(tmp_path / "p.tsv", 5) == parts
        assert cv_split(None, mode="file", path=tmp_path / "p.tsv") == cv_split(
            [str(i) for i in range(12)])


class TestTraining:
    def test_degenerate(self, toy_ds):
        ds = dataclasses.replace(toy_ds, qrels={q: {} for q in toy_ds.qrels})
        with pytest.raises(ValueError, match="degenerate training set"):
            train(ds, TOY_MODEL, TOY_TRAIN)

    def test_deterministic(self, toy_ds):
        a = train(toy_ds, TOY_MODEL, TOY_TRAIN).model.snapshot_bytes()
        b = train(toy_ds, TOY_MODEL, TOY_TRAIN).model.snapshot_bytes()
        assert a == b

    @pytest.mark.parametrize("variant", ["full", "prf-only", "group-only"])
    def test_every_group_moves(self, toy_ds, variant):
        model = CoBERT(TOY_MODEL)
        model.init_from_first_pass()
        exs = prepare_examples(toy_ds, model, TOY_TRAIN.k)
        before = {p.name: p.data.copy() for p in model.parameters()}
        tcfg = dataclasses.replace(TOY_TRAIN, variant=variant, warmup_fraction=0.0)
        train_cobert(model, exs, tcfg, max_steps=2)  # a 1-step schedule decays to lr 0
        groups = model.parameter_groups()
        trainable = {p.name for p in model.trainable_for(variant)}
        for name, params in groups.items():
            moved = any(not np.array_equal(before[p.name], p.data) for p in params)
            assert moved == any(p.name in trainable for p in params), name

    def test_overfits_two_queries(self):
        ds = toy_dataset(n_queries=2, docs_per_query=12, seed=3, k=12)
        tcfg = dataclasses.replace(TOY_TRAIN, epochs=100, k=12, base_lr=1e-2, warmup_fraction=0.0)
        res = train(ds, TOY_MODEL, tcfg)
        assert res.history[-1].loss < 0.05

    def test_validation_selects_epoch(self, toy_ds):
        qids = sorted(toy_ds.queries, key=int)
        tcfg = dataclasses.replace(TOY_TRAIN, epochs=3)
        res = train(toy_ds, TOY_MODEL, tcfg, qids[:3], qids[3:])
        vals = [r.valid_ndcg for r in res.history]
        assert res.selected_epoch == select_model(vals)
        assert len(res.history) == 3
