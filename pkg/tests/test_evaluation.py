import itertools
import math

import numpy as np
import pytest

from relpriv.encoder import init_params
from relpriv.errors import ConfigError
from relpriv.evaluation import (
    MiaReport,
    RankingBatch,
    audit,
    cosine_scores,
    evaluate_relations,
    exact_signed_rank_tail,
    f1_counts,
    linear_probe,
    metrics_from_ranks,
    mia_scores,
    rank_metrics,
    score_histogram,
    target_ranks,
    tpr_at_fpr,
    wilcoxon_signed_rank,
)
from relpriv.graph import synth_graph, split_relations


class TestRanking:
    def test_orthonormal_identity(self):
        eye = np.eye(8)
        prec1, mrr = rank_metrics(RankingBatch(queries=eye, targets=eye))
        assert prec1 == 1.0 and mrr == 1.0

    def test_mrr_arithmetic(self):
        prec1, mrr = metrics_from_ranks([1, 2, 4])
        assert abs(mrr - (1 + 0.5 + 0.25) / 3) <= 1e-15
        assert abs(mrr - 0.5833333333333334) <= 1e-12
        assert abs(prec1 - 1 / 3) <= 1e-15

    def test_constructed_ranks(self):
        targets = np.eye(4)
        queries = np.array(
            [
                [1.0, 0.0, 0.0, 0.0],  # rank 1
                [2.0, 1.0, 0.0, 0.0],  # target 1 beaten by target 0: rank 2
                [3.0, 2.0, 1.0, 0.0],  # rank 3
                [1.0, 1.0, 1.0, 1.0],  # all tied, index break: rank 4
            ]
        )
        ranks = target_ranks(RankingBatch(queries=queries, targets=targets))
        assert ranks.tolist() == [1, 2, 3, 4]

    def test_tie_break_by_target_index(self):
        targets = np.eye(2)
        queries = np.array([[1.0, 1.0], [1.0, 1.0]])
        ranks = target_ranks(RankingBatch(queries=queries, targets=targets))
        # query 0 ties with itself only at index 0: rank 1;
        # query 1 ties with index 0 which wins the break: rank 2
        assert ranks.tolist() == [1, 2]

    def test_random_embeddings_prec1_near_uniform(self):
        rng = np.random.default_rng(10)
        hits, total = 0, 0
        for _ in range(40):
            q = rng.normal(size=(256, 8))
            t = rng.normal(size=(256, 8))
            prec1, _ = rank_metrics(RankingBatch(queries=q, targets=t))
            hits += prec1 * 256
            total += 256
        p = 1 / 256
        sigma = math.sqrt(total * p * (1 - p))
        assert abs(hits - total * p) <= 3 * sigma

    def test_bounds_and_prec_le_mrr(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            b = int(rng.integers(2, 40))
            q = rng.normal(size=(b, 5))
            t = rng.normal(size=(b, 5))
            prec1, mrr = rank_metrics(RankingBatch(queries=q, targets=t))
            assert 1 / b <= mrr <= 1.0
            assert prec1 <= mrr

    def test_degenerate_batch_rejected(self):
        one = np.ones((1, 3))
        with pytest.raises(ConfigError):
            rank_metrics(RankingBatch(queries=one, targets=one))

    def test_evaluate_relations_on_graph(self):
        g = synth_graph(80, 4, 0.4, 0.02, 40, seed=3, max_tokens=5)
        split = split_relations(g, 0.3, seed=3)
        params = init_params(g.vocab_size, (6, 4), seed=1)
        out = evaluate_relations(params, g, split.eval_relations, batch_size=64, seed=5)
        assert 0.0 <= out["prec1"] <= out["mrr"] <= 1.0
        again = evaluate_relations(params, g, split.eval_relations, batch_size=64, seed=5)
        assert out == again


class TestF1:
    def test_constant_predictor_two_balanced_classes(self):
        y_true = np.array([0] * 10 + [1] * 10)
        y_pred = np.zeros(20, dtype=int)
        per_class, macro, micro = f1_counts(y_true, y_pred, 2)
        assert abs(per_class[0] - 2 / 3) <= 1e-15
        assert per_class[1] == 0.0
        assert abs(macro - 1 / 3) <= 1e-15
        assert abs(micro - 0.5) <= 1e-15

    def test_perfect_predictor(self):
        y = np.array([0, 1, 2, 1, 0])
        _, macro, micro = f1_counts(y, y, 3)
        assert macro == 1.0 and micro == 1.0


class TestLinearProbe:
    def test_separable_classes_reach_one(self):
        rng = np.random.default_rng(4)
        centers = np.array([[4.0, 0.0], [-4.0, 0.0]])
        labels = np.repeat([0, 1], 30)
        emb = centers[labels] + 0.1 * rng.normal(size=(60, 2))
        macro, micro = linear_probe(emb, labels, shots=8, seed=0)
        assert macro == 1.0 and micro == 1.0

    def test_random_labels_near_chance(self):
        # labels independent of embeddings: accuracy is exactly 1/C per
        # prediction, so pooled accuracy is binomial
        rng = np.random.default_rng(5)
        n_classes = 4
        hits, total = 0, 0
        for seed in range(5):
            emb = rng.normal(size=(160, 6))
            labels = np.repeat(np.arange(n_classes), 40)
            macro, micro = linear_probe(emb, labels, shots=8, seed=seed)
            n_test = 160 - n_classes * 16
            hits += micro * n_test
            total += n_test
        p = 1 / n_classes
        sigma = math.sqrt(total * p * (1 - p))
        assert abs(hits - total * p) <= 3 * sigma

    def test_insufficient_labels_rejected(self):
        emb = np.zeros((14, 3))
        labels = np.array([0] * 12 + [1] * 2)
        with pytest.raises(ConfigError, match="class 1"):
            linear_probe(emb, labels, shots=4, seed=0)


class TestMiaScores:
    def test_identical_vectors(self):
        assert cosine_scores(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]]))[0] == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_scores(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))[0] == 0.0

    def test_known_value(self):
        got = cosine_scores(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]))[0]
        assert abs(got - 1 / math.sqrt(2)) <= 1e-15

    def test_zero_vector_scores_zero(self):
        got = cosine_scores(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]))
        assert got[0] == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        u = rng.normal(size=(10, 4))
        w = rng.normal(size=(10, 4))
        a = cosine_scores(u, w)
        b = cosine_scores(3.7 * u, w)
        assert np.abs(a - b).max() <= 1e-14

    def test_graph_pairs(self):
        g = synth_graph(30, 3, 0.4, 0.05, 20, seed=8, max_tokens=4)
        params = init_params(g.vocab_size, (5, 4), seed=0)
        pairs = g.sorted_relations()[:10]
        scores = mia_scores(params, g, pairs)
        assert scores.shape == (10,)
        assert (np.abs(scores) <= 1.0 + 1e-12).all()


class TestTprAtFpr:
    def test_perfect_separation(self):
        out = tpr_at_fpr(np.ones(20), np.zeros(20), (0.05,))
        assert out[0.05] == 1.0

    def test_hand_threshold_sweep(self):
        members = np.array([0.9, 0.8, 0.1])
        nonmembers = np.array([0.7, 0.2, 0.05])
        out = tpr_at_fpr(members, nonmembers, (1 / 3,))
        assert out[1 / 3] == pytest.approx(2 / 3)

    def test_identical_distributions_tpr_near_level(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=4000)
        out = tpr_at_fpr(scores[:2000], scores[2000:], (0.05, 0.1))
        for level, tpr in out.items():
            assert abs(tpr - level) <= 0.02

    def test_monotone_in_level(self):
        rng = np.random.default_rng(8)
        m = rng.normal(size=500) + 0.3
        n = rng.normal(size=500)
        out = tpr_at_fpr(m, n, (0.01, 0.05, 0.1, 0.5))
        values = [out[k] for k in (0.01, 0.05, 0.1, 0.5)]
        assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))

    def test_level_zero(self):
        # separated scores: a threshold above every non-member catches all
        out = tpr_at_fpr(np.array([5.0, 6.0]), np.array([1.0, 2.0]), (0.0,))
        assert out[0.0] == 1.0
        # a non-member holds the global max: no finite threshold reaches
        # zero false positives, so nothing is flagged
        out = tpr_at_fpr(np.array([5.0, 6.0]), np.array([1.0, 7.0]), (0.0,))
        assert out[0.0] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            tpr_at_fpr(np.array([]), np.array([1.0]), (0.05,))


class TestWilcoxon:
    def test_five_positive_differences(self):
        assert wilcoxon_signed_rank([1.0, 2.0, 0.5, 3.0, 0.1]) == pytest.approx(1 / 32)

    def test_mirrored_differences_not_significant(self):
        diffs = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0]
        assert wilcoxon_signed_rank(diffs) >= 0.5

    def test_zeros_dropped(self):
        base = [1.0, 2.0, 0.5, 3.0, 0.1]
        assert wilcoxon_signed_rank(base + [0.0, 0.0]) == wilcoxon_signed_rank(base)

    def test_too_few_nonzero_rejected(self):
        with pytest.raises(ConfigError):
            wilcoxon_signed_rank([1.0, -1.0, 0.0, 0.0, 0.0])
        with pytest.raises(ConfigError):
            wilcoxon_signed_rank([0.0] * 10)

    def test_exact_tail_matches_bruteforce_enumeration(self):
        rng = np.random.default_rng(9)
        diffs = rng.normal(size=10)
        diffs = diffs[diffs != 0]
        from scipy.stats import rankdata

        ranks = rankdata(np.abs(diffs))
        w_obs = ranks[diffs > 0].sum()
        count = 0
        for signs in itertools.product([0, 1], repeat=len(ranks)):
            if sum(r for r, s in zip(ranks, signs) if s) >= w_obs:
                count += 1
        expected = count / 2 ** len(ranks)
        assert wilcoxon_signed_rank(diffs) == pytest.approx(expected, abs=1e-12)

    def test_enumeration_distribution_sums_to_one(self):
        ranks = np.arange(1, 9, dtype=float)
        sums = sorted({
            sum(r for r, s in zip(ranks, signs) if s)
            for signs in itertools.product([0, 1], repeat=8)
        })
        pmf_total = 0.0
        for w in sums:
            tail_here = exact_signed_rank_tail(ranks, w)
            tail_above = exact_signed_rank_tail(ranks, w + 0.5)
            pmf_total += tail_here - tail_above
        assert pmf_total == pytest.approx(1.0, abs=1e-12)

    def test_normal_approximation_close_to_exact_at_n20(self):
        rng = np.random.default_rng(12)
        diffs = rng.normal(size=25) + 0.45
        subset = diffs[:20]
        exact = wilcoxon_signed_rank(subset, exact_limit=20)
        approx = wilcoxon_signed_rank(subset, exact_limit=5)
        assert abs(exact - approx) <= 0.01


class TestAudit:
    def make_setup(self, seed=0):
        g = synth_graph(120, 4, 0.35, 0.03, 50, seed=seed, max_tokens=5)
        split = split_relations(g, 0.4, seed=seed)
        params = init_params(g.vocab_size, (6, 4), seed=seed)
        return g, split, params

    def test_untrained_encoder_near_null(self):
        # members and non-members are exchangeable for a random encoder
        tprs, ps = [], []
        for seed in range(5):
            g, split, params = self.make_setup(seed)
            n = min(len(split.train_relations), len(split.eval_relations), 120)
            rep = audit(params, g, split.train_relations, split.eval_relations, n, seed=seed)
            tprs.append(rep.tpr_at_fpr[0.05])
            ps.append(rep.wilcoxon_p)
        assert np.median(ps) >= 0.01
        assert abs(np.mean(tprs) - 0.05) <= 0.06

    def test_members_equal_nonmembers_near_null(self):
        g, split, params = self.make_setup(3)
        rels = split.train_relations
        ps, tprs = [], []
        for seed in range(5):
            rep = audit(params, g, rels, rels, 100, seed=seed)
            ps.append(rep.wilcoxon_p)
            tprs.append(rep.tpr_at_fpr[0.05])
        assert np.median(ps) >= 0.05
        assert abs(np.mean(tprs) - 0.05) <= 0.06

    def test_insufficient_pairs_rejected(self):
        g, split, params = self.make_setup(1)
        with pytest.raises(ConfigError):
            audit(params, g, split.train_relations[:5], split.eval_relations, 10, seed=0)

    def test_report_shape_and_histogram(self):
        g, split, params = self.make_setup(2)
        rep = audit(params, g, split.train_relations, split.eval_relations, 50, seed=1)
        assert isinstance(rep, MiaReport)
        assert rep.member_scores.shape == (50,)
        assert set(rep.tpr_at_fpr) == {0.01, 0.05, 0.1}
        rows = score_histogram(rep, bins=10)
        assert len(rows) == 10
        assert sum(r[1] for r in rows) == 50
