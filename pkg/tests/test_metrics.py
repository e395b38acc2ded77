import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from memextract import metrics as M
from memextract.nn import ShapeError

MID = M.STANDARD_TIERS[1]
HIGH = M.STANDARD_TIERS[2]


def records(scores, idx=None):
    idx = range(len(scores)) if idx is None else idx
    return [M.MatchRecord(i, j, s) for i, (j, s) in enumerate(zip(idx, scores))]


class TestScorer:
    def test_identical_sets_match_themselves(self, rng):
        x = rng.standard_normal((12, 6))
        recs = M.best_matches(x, x)
        assert [r.train_index for r in recs] == list(range(12))
        np.testing.assert_allclose([r.score for r in recs], 1.0, atol=1e-12)

    def test_hand_computed_cosines(self):
        # zero-mean vectors so standardisation leaves the direction unchanged
        g = np.array([[1.0, -1.0, 0.0]])
        u = g[0] / np.sqrt(2)
        w = np.array([1.0, 1.0, -2.0]) / np.sqrt(6)
        train = np.stack([0.3 * u + np.sqrt(1 - 0.09) * w, 0.7 * u + np.sqrt(1 - 0.49) * w])
        (rec,) = M.best_matches(g, train)
        assert (rec.gen_index, rec.train_index) == (0, 1)
        assert rec.score == pytest.approx(0.7, abs=1e-12)

    def test_orthogonal_scores_zero(self):
        (rec,) = M.best_matches(np.array([[1.0, -1.0, 0.0, 0.0]]),
                                np.array([[0.0, 0.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0]]))
        assert rec.score == pytest.approx(0.0, abs=1e-15)

    def test_ties_go_to_lowest_index(self):
        t = np.array([[0.0, 1.0, 2.0], [5.0, 1.0, 3.0], [0.0, 2.0, 4.0]])
        (rec,) = M.best_matches(np.array([[1.0, 2.0, 3.0]]), t)
        assert rec.train_index == 0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError, match="dimension"):
            M.best_matches(np.zeros((2, 3)), np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            M.best_matches(np.zeros((0, 3)), np.zeros((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (2, 5), elements=st.floats(-10, 10)))
    def test_symmetric_and_bounded(self, ab):
        for kind in ("cosine_normalized", "neg_l2_mapped"):
            sc = M.SimilarityScorer(kind)
            s_ab = sc.matrix(ab[:1], ab[1:])[0, 0]
            s_ba = sc.matrix(ab[1:], ab[:1])[0, 0]
            assert s_ab == pytest.approx(s_ba, abs=1e-12)
            lo = -1.0 if kind == "cosine_normalized" else 0.0
            assert lo - 1e-12 <= s_ab <= 1.0 + 1e-12

    def test_neg_l2_matches_naive(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
        got = M.SimilarityScorer("neg_l2_mapped").matrix(a, b)
        want = [[oracles.naive_neg_l2(x, y) for y in b.tolist()] for x in a.tolist()]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_plugin_scorer(self, rng):
        sc = M.SimilarityScorer("plugin", fn=lambda a, b: -np.abs(a[:, None, 0] - b[None, :, 0]))
        (rec,) = M.best_matches(np.array([[2.1, 0.0]]), np.array([[0.0, 9.0], [2.0, -5.0]]), sc)
        assert rec.train_index == 1

    def test_plugin_requires_fn(self):
        with pytest.raises(ValueError):
            M.SimilarityScorer("plugin")
        with pytest.raises(ValueError):
            M.SimilarityScorer("cosine_normalized", fn=np.dot)

    def test_chunking_and_threads_do_not_change_matches(self, rng, monkeypatch):
        gen, train = rng.standard_normal((50, 8)), rng.standard_normal((30, 8))
        whole = M.best_match_arrays(gen, train)
        monkeypatch.setattr(M, "MATCH_CHUNK", 7)
        ref = M.best_match_arrays(gen, train)
        np.testing.assert_array_equal(ref[0], whole[0])
        np.testing.assert_allclose(ref[1], whole[1], rtol=1e-13)
        idx, s = M.best_match_arrays(gen, train, threads=3)
        np.testing.assert_array_equal(idx, ref[0])
        np.testing.assert_array_equal(s, ref[1])


class TestTiers:
    def test_standard_tiers_are_contiguous(self):
        low, mid, high = M.STANDARD_TIERS
        assert low.beta == mid.alpha and mid.beta == high.alpha and high.beta == 1.0

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            M.SimilarityTier("x", 0.6, 0.5)
        with pytest.raises(ValueError):
            M.SimilarityTier("x", 0.5, 1.5)

    def test_boundaries(self):
        assert list(MID.contains([0.5, 0.6, 0.5999])) == [True, False, True]
        assert list(HIGH.contains([0.6, 1.0])) == [True, True]

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1, 1))
    def test_partition(self, s):
        hits = sum(bool(t.contains(s)) for t in M.STANDARD_TIERS)
        assert hits == (1 if s >= 0.4 else 0)


class TestAmsUms:
    def test_mid_tier_enumeration(self):
        assert M.ams(records([0.45, 0.55, 0.62, 0.30]), MID) == 0.25

    def test_all_below_tiers(self):
        recs = records([0.1, 0.2, 0.39])
        assert all(M.ams(recs, t) == 0 and M.ums(recs, t) == 0 for t in M.STANDARD_TIERS)

    def test_identical_matches_count_once(self):
        n = 8
        recs = records([0.55] * n, [3] * n)
        assert M.ums(recs, MID, n) == 1 / n
        assert M.ams(recs, MID, n) == 1.0

    def test_set_union_example(self):
        recs = records([0.55, 0.52, 0.58, 0.51] + [0.1] * 6, [2, 2, 7, 9] + [0] * 6)
        assert M.ums(recs, MID, 10) == 0.3

    def test_requires_positive_and_matching_n(self):
        with pytest.raises(ValueError):
            M.ams([], MID, 0)
        with pytest.raises(ValueError):
            M.ums(records([0.5]), MID, 2)

    def test_tier_fractions_sum_to_one(self, rng):
        rep = M.evaluate(rng.standard_normal((300, 4)), rng.standard_normal((20, 4)), lam=0.0)
        below = np.mean(rep.scores < 0.4)
        assert sum(r.ams for r in rep.tiers) + below == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(n_gen=st.integers(1, 40), n_train=st.integers(1, 15), dim=st.integers(3, 6),
           seed=st.integers(0, 2**31), kind=st.sampled_from(["cosine_normalized", "neg_l2_mapped"]))
    def test_against_brute_force(self, n_gen, n_train, dim, seed, kind):
        rng = np.random.default_rng(seed)
        gen = rng.standard_normal((n_gen, dim))
        near = min(n_train // 2, n_gen)
        train = np.concatenate([gen[:near] + 0.3 * rng.standard_normal((near, dim)),
                                rng.standard_normal((n_train - near, dim))])
        score = oracles.naive_cosine if kind == "cosine_normalized" else oracles.naive_neg_l2
        ref = oracles.naive_best_matches(gen, train, score)
        rep = M.evaluate(gen, train, 1.0, scorer=M.SimilarityScorer(kind))
        np.testing.assert_allclose(rep.scores, [s for _, s in ref], atol=1e-12)
        for r in rep.tiers:
            t = r.tier
            assert r.ams == oracles.naive_ams(ref, t.alpha, t.beta, t.closed)
            assert r.ums == oracles.naive_ums(ref, t.alpha, t.beta, t.closed)
            assert 0 <= r.ums <= r.ams <= 1

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from([0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 1.0])),
                    min_size=1, max_size=30))
    def test_grid_scores_against_brute_force(self, pairs):
        recs = records([s for _, s in pairs], [j for j, _ in pairs])
        for t in M.STANDARD_TIERS:
            assert M.ams(recs, t) == oracles.naive_ams(pairs, t.alpha, t.beta, t.closed)
            assert M.ums(recs, t) == oracles.naive_ums(pairs, t.alpha, t.beta, t.closed)
            assert M.ums(recs, t) <= M.ams(recs, t)


class TestReports:
    def test_csv_columns_and_roundtrip(self, tmp_path, rng):
        train = rng.standard_normal((10, 5))
        reps = [M.evaluate(train + 0.1 * lam * rng.standard_normal((10, 5)), train, lam)
                for lam in (0.0, 2.0)]
        text = M.reports_csv(reps)
        lines = text.splitlines()
        assert lines[0] == "lambda,tier,alpha,beta,ams,ums,in_tier_count,unique_count,n_gen"
        assert len(lines) == 1 + 2 * 3
        path = tmp_path / "r.csv"
        path.write_text(text)
        rows = M.read_reports_csv(path)
        assert rows[2]["tier"] == "high" and rows[2]["ams"] == reps[0].tier("high").ams
        assert rows[3]["lambda"] == 2.0

    def test_matches_csv(self, rng):
        train = rng.standard_normal((4, 3))
        rep = M.evaluate(train, train, 0.0)
        lines = M.matches_csv([rep]).splitlines()
        assert lines[0] == "lambda,gen_index,train_index,score"
        assert lines[1].split(",")[:3] == ["0.0", "0", "0"]

    def test_empirical_probs_sum_to_ams(self, rng):
        train = rng.standard_normal((6, 4))
        rep = M.evaluate(train[rng.integers(0, 6, 40)] + 0.5 * rng.standard_normal((40, 4)), train, 0.0)
        p = M.empirical_mem_probs(rep, MID, 6)
        assert p.sum() == pytest.approx(rep.tier("mid").ams)


class TestExpectations:
    def test_zero_probabilities(self):
        assert M.expected_mem_count([0.0, 0.0, 0.0], 50) == 0.0
        assert M.expected_unique_mem_count([0.0, 0.0], 50) == 0.0

    def test_linearity(self):
        assert M.expected_mem_count([0.1, 0.2], 10) == pytest.approx(3.0)

    def test_certain_hits(self):
        assert M.expected_unique_mem_count([1.0] * 7, 3) == 7.0

    def test_single_coin(self):
        assert M.expected_unique_mem_count([0.5], 2) == 0.75

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            M.expected_mem_count([1.2], 3)

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 1)), st.integers(1, 200))
    def test_unique_bounds_and_monotonicity(self, p, n_gen):
        u = M.expected_unique_mem_count(p, n_gen)
        assert u <= len(p) + 1e-12
        assert u <= M.expected_mem_count(p, n_gen) + 1e-9
        assert M.expected_unique_mem_count(p, n_gen + 1) >= u - 1e-12

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(6)) * 0.4
        n_gen = 20
        mem, uniq = oracles.simulate_mem_counts(p, n_gen, 20_000, rng)
        ok, _ = oracles.within_sigmas(mem.mean(), M.expected_mem_count(p, n_gen), mem)
        assert ok
        ok, _ = oracles.within_sigmas(uniq.mean(), M.expected_unique_mem_count(p, n_gen), uniq)
        assert ok
