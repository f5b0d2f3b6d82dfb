import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corank.groups import (GroupScorer, ScoredList, merge_scores, pad_group, pointwise_score,
                           schedule_groups)


def _windows(sched):
    return [(g[0], g[-1]) for g in sched.groups]


class TestSchedule:
    def test_six_groups(self):
        sched = schedule_groups(1000, 200, 5)
        assert _windows(sched) == [(1, 200), (196, 395), (391, 590), (586, 785), (781, 980),
                                   (976, 1000)]
        assert sched.pad_masks[-1].sum() == 25
        assert all(m.all() for m in sched.pad_masks[:-1])

    @pytest.mark.parametrize("k,o", [(1, 0), (7, 3), (10, 9)])
    def test_single_group(self, k, o):
        sched = schedule_groups(k, 10, o)
        assert sched.groups == (tuple(range(1, k + 1)),)
        assert len(sched.pad_masks[0]) == 10

    def test_small_enumeration(self):
        sched = schedule_groups(10, 4, 1)
        assert sched.groups == ((1, 2, 3, 4), (4, 5, 6, 7), (7, 8, 9, 10))
        assert all(m.all() for m in sched.pad_masks)

    def test_overlap_too_large(self):
        with pytest.raises(ValueError, match="overlap must be smaller than group size"):
            schedule_groups(10, 4, 4)

    def test_exhaustive_coverage_and_overlap(self):
        for k in range(1, 51):
            for n in range(1, 11):
                for o in range(n):
                    sched = schedule_groups(k, n, o)
                    assert len(sched) == -(-max(k - o, 1) // (n - o))
                    seen = set(itertools.chain.from_iterable(sched.groups))
                    assert seen == set(range(1, k + 1))
                    for g, members in enumerate(sched.groups):
                        assert members[0] == g * (n - o) + 1
                        assert sched.pad_masks[g].sum() == len(members)
                        if g < len(sched) - 1:
                            assert len(members) == n
                            nxt = set(sched.groups[g + 1])
                            if g + 1 < len(sched) - 1:
                                assert len(set(members) & nxt) == o


class TestMerge:
    def test_disjoint_is_identity(self):
        sched = schedule_groups(6, 3, 0)
        docs = list("abcdef")
        out = merge_scores([[6, 5, 4], [3, 2, 1]], sched, docs)
        assert out.doc_ids == docs
        assert [e[2] for e in out.entries] == [1, 1, 1, 2, 2, 2]

    def test_earliest_group_wins(self):
        sched = schedule_groups(10, 4, 1)
        docs = [f"d{i}" for i in range(1, 11)]
        scores = [[0.1, 0.2, 0.3, 0.4], [9.0, 0.5, 0.6, 0.7], [9.0, 0.8, 0.9, 1.0]]
        out = merge_scores(scores, sched, docs)
        final = {d: (s, g) for d, s, g in out.entries}
        assert final["d4"] == (0.4, 1)
        assert final["d7"] == (0.7, 2)

    @pytest.mark.parametrize("seed", range(20))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        k, n, o = 10, 4, 1
        sched = schedule_groups(k, n, o)
        docs = [f"x{i:02d}" for i in rng.permutation(k)]
        scores = [rng.integers(0, 4, size=n).astype(float) for _ in sched.groups]
        expected = {}
        for g in range(len(sched)):
            start = g * (n - o)
            for slot in range(n):
                rank = start + slot
                if rank < k and docs[rank] not in expected:
                    expected[docs[rank]] = scores[g][slot]
        order = sorted(expected, key=lambda d: (-expected[d], d))
        out = merge_scores(scores, sched, docs)
        assert out.doc_ids == order
        assert [e[1] for e in out.entries] == [expected[d] for d in order]

    def test_each_doc_exactly_once(self):
        sched = schedule_groups(1000, 200, 5)
        docs = [f"d{i}" for i in range(1000)]
        out = merge_scores([np.zeros(200)] * len(sched), sched, docs)
        assert sorted(out.doc_ids) == sorted(docs)

    def test_group_count_mismatch(self):
        with pytest.raises(ValueError):
            merge_scores([[1.0]], schedule_groups(10, 4, 1), list("abcdefghij"))

    def test_scored_list_ties_by_doc_id(self):
        sl = ScoredList("q", [("b", 1.0, 1), ("a", 1.0, 1), ("c", 2.0, 1)])
        assert sl.doc_ids == ["c", "a", "b"]

    def test_scored_list_duplicate(self):
        with pytest.raises(ValueError):
            ScoredList("q", [("a", 1.0, 1), ("a", 0.0, 2)])


class TestPointwise:
    def test_hand_example(self):
        assert pointwise_score([3.0, -1.0], [1.0, 2.0], 0.5).data == pytest.approx(1.5)

    def test_zero_weights(self):
        x = np.random.default_rng(0).normal(size=5)
        assert pointwise_score(x, np.zeros(5), -2.25).data == -2.25

    def test_basis_probe(self):
        w = np.array([0.7, -0.2, 1.1])
        assert pointwise_score([1.0, 0.0, 0.0], w, 0.0).data == 0.7

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            pointwise_score([1.0, 2.0], [1.0, 2.0, 3.0], 0.0)


class TestGroupScorer:
    def test_shape_and_count(self):
        gs = GroupScorer(16, 4, layers=2, seed=0)
        x = np.random.default_rng(0).normal(size=(6, 16))
        assert gs.score_group(x, n=6).shape == (6,)
        with pytest.raises(ValueError):
            gs.score_group(x, n=5)

    def test_no_positional_parameters(self):
        gs = GroupScorer(16, 4, layers=4)
        assert not any("position" in p.name for p in gs.parameters())

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        gs = GroupScorer(16, 4, layers=4, seed=seed % 5)
        x = rng.normal(size=(7, 16))
        perm = rng.permutation(7)
        a = gs.score_group(x).data
        b = gs.score_group(x[perm]).data
        assert np.abs(b - a[perm]).max() < 1e-9

    def test_padding_does_not_leak(self):
        rng = np.random.default_rng(2)
        gs = GroupScorer(16, 4, layers=2, seed=1)
        x = rng.normal(size=(5, 16))
        mask = np.array([True, True, True, False, False])
        y = x.copy()
        y[3:] = rng.normal(size=(2, 16))
        a = gs.score_group(x, mask).data
        b = gs.score_group(y, mask).data
        assert np.abs(a[:3] - b[:3]).max() <= 1e-12
        assert np.all(a[3:] == 0.0)

    def test_batched_groups_match(self):
        rng = np.random.default_rng(3)
        gs = GroupScorer(16, 4, layers=2, seed=2)
        x = rng.normal(size=(2, 4, 16))
        masks = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
        batched = gs.score_groups(x, masks).data
        for g in range(2):
            np.testing.assert_allclose(gs.score_group(x[g], masks[g]).data, batched[g], atol=1e-12)

    def test_pad_group(self):
        from corank.tensor import Tensor
        v, mask = pad_group(Tensor(np.ones((2, 3))), 4)
        assert v.shape == (4, 3)
        assert mask.tolist() == [True, True, False, False]
        assert np.all(v.data[2:] == 0)
