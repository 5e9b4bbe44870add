"""Prediction metrics: NLL/error, calibration, member diversity, OOD
separation, the few-shot probe, and the mergeable accumulator."""

import math

import numpy as np
import pytest

from moelab.errors import ConfigError
from moelab.metrics import (
    EvalReport,
    MetricAccumulator,
    ece,
    fewshot_probe,
    kl_diversity,
    nll_error,
    ood_metrics,
    ood_scores,
    pair_diversity,
)


class TestNllError:
    def test_coin_flip(self):
        p = np.full((8, 2), 0.5)
        y = np.zeros(8, dtype=int)
        nll, err = nll_error(p, y)
        np.testing.assert_allclose(nll, math.log(2.0), atol=1e-12)

    def test_perfect_one_hot(self):
        p = np.eye(4)[[0, 1, 2, 3]]
        nll, err = nll_error(p, np.arange(4))
        assert err == 0.0
        assert nll < 1e-10

    def test_hand_example(self):
        p = np.array([[0.9, 0.1], [0.1, 0.9]])
        y = np.array([0, 0])
        nll, err = nll_error(p, y)
        np.testing.assert_allclose(nll, 1.2040, atol=1e-4)
        np.testing.assert_allclose(nll, -(math.log(0.9) + math.log(0.1)) / 2,
                                   atol=1e-12)
        assert err == 50.0

    def test_argmax_tie_breaks_low(self):
        p = np.array([[0.5, 0.5]])
        _, err0 = nll_error(p, np.array([0]))
        _, err1 = nll_error(p, np.array([1]))
        assert err0 == 0.0 and err1 == 100.0

    def test_order_invariance(self):
        gen = np.random.default_rng(0)
        raw = gen.uniform(0.01, 1.0, size=(64, 5))
        p = raw / raw.sum(axis=1, keepdims=True)
        y = gen.integers(0, 5, size=64)
        perm = gen.permutation(64)
        assert nll_error(p, y) == nll_error(p[perm], y[perm])


class TestEce:
    def test_full_confidence_half_correct(self):
        p = np.array([[1.0, 0.0]] * 4)
        y = np.array([0, 0, 1, 1])
        np.testing.assert_allclose(ece(p, y), 0.5, atol=1e-12)

    def test_single_sample_correct(self):
        for c in (0.55, 0.7, 0.95):
            p = np.array([[c, 1.0 - c]])
            np.testing.assert_allclose(ece(p, np.array([0])), abs(1.0 - c),
                                       atol=1e-12)

    def test_self_consistent_predictions_calibrated(self):
        # labels drawn from the predicted distribution itself: ECE -> 0
        gen = np.random.default_rng(1)
        n = 100_000
        raw = gen.uniform(0.1, 1.0, size=(n, 4))
        p = raw / raw.sum(axis=1, keepdims=True)
        u = gen.uniform(size=n)
        y = (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
        assert ece(p, y) < 0.01

    def test_bins_one_degenerate(self):
        gen = np.random.default_rng(2)
        raw = gen.uniform(0.01, 1.0, size=(50, 3))
        p = raw / raw.sum(axis=1, keepdims=True)
        y = gen.integers(0, 3, size=50)
        conf = p.max(axis=1).mean()
        acc = (p.argmax(axis=1) == y).mean()
        np.testing.assert_allclose(ece(p, y, bins=1), abs(acc - conf),
                                   atol=1e-12)

    def test_bounded_by_one(self):
        gen = np.random.default_rng(3)
        raw = gen.uniform(0.01, 1.0, size=(200, 4))
        p = raw / raw.sum(axis=1, keepdims=True)
        y = gen.integers(0, 4, size=200)
        assert 0.0 <= ece(p, y) <= 1.0

    def test_rejects_zero_bins(self):
        with pytest.raises(ConfigError):
            ece(np.array([[1.0]]), np.array([0]), bins=0)


class TestKlDiversity:
    def test_identical_members_zero(self):
        p = np.full((3, 5, 4), 0.25)
        assert kl_diversity(p) == 0.0

    def test_hand_pair(self):
        mp = np.array([[[0.75, 0.25]], [[0.25, 0.75]]])
        # KL(p||q) = KL(q||p) = 0.5 ln 3 for this symmetric pair
        np.testing.assert_allclose(kl_diversity(mp), 0.5 * math.log(3.0),
                                   atol=1e-12)
        np.testing.assert_allclose(kl_diversity(mp), 0.5493, atol=1e-4)

    def test_member_order_invariance(self):
        gen = np.random.default_rng(4)
        raw = gen.uniform(0.05, 1.0, size=(4, 10, 3))
        mp = raw / raw.sum(axis=-1, keepdims=True)
        a = kl_diversity(mp)
        b = kl_diversity(mp[[2, 0, 3, 1]])
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_nonnegative(self):
        gen = np.random.default_rng(5)
        raw = gen.uniform(0.05, 1.0, size=(3, 20, 5))
        mp = raw / raw.sum(axis=-1, keepdims=True)
        assert kl_diversity(mp) >= 0.0

    def test_single_member_rejected(self):
        with pytest.raises(ConfigError):
            kl_diversity(np.full((1, 4, 2), 0.5))


class TestPairDiversity:
    def test_identical_members(self):
        p = np.full((2, 6, 3), 1.0 / 3.0)
        y = np.zeros(6, dtype=int)
        cos, dis = pair_diversity(p, y)
        np.testing.assert_allclose(cos, 1.0, atol=1e-9)
        assert dis == 0.0

    def test_orthogonal_one_hots(self):
        mp = np.zeros((2, 4, 3))
        mp[0, :, 0] = 1.0
        mp[1, :, 1] = 1.0
        cos, _ = pair_diversity(mp, np.zeros(4, dtype=int))
        np.testing.assert_allclose(cos, 0.0, atol=1e-9)

    def test_hand_normalized_disagreement(self):
        # argmax differs on 1 of 4 inputs, mean member error 0.25 -> ratio 1
        mp = np.zeros((2, 4, 2))
        mp[:, :, 0] = 0.9
        mp[:, :, 1] = 0.1
        mp[1, 0] = [0.1, 0.9]  # the single disagreement, and member 1's error
        y = np.zeros(4, dtype=int)
        _, dis = pair_diversity(mp, y)
        # disagreement rate 0.25, mean member error (0 + 0.25)/2 = 0.125
        np.testing.assert_allclose(dis, 0.25 / 0.125, atol=1e-12)

    def test_perfect_members_zero_ratio(self):
        mp = np.zeros((2, 3, 2))
        mp[:, :, 0] = 1.0
        cos, dis = pair_diversity(mp, np.zeros(3, dtype=int))
        assert dis == 0.0


class TestOodMetrics:
    def test_perfect_separation(self):
        out = ood_metrics([0.1, 0.2], [0.3, 0.4])
        assert out["auc_roc"] == 1.0
        assert out["auc_pr"] == 1.0
        assert out["fpr95"] == 0.0

    def test_identical_distributions_near_half(self):
        gen = np.random.default_rng(6)
        a = gen.uniform(size=10_000)
        b = gen.uniform(size=10_000)
        out = ood_metrics(a, b)
        assert abs(out["auc_roc"] - 0.5) < 0.02

    def test_ties_counted_half(self):
        out = ood_metrics([0.5], [0.5])
        assert out["auc_roc"] == 0.5

    def test_reversed_separation(self):
        out = ood_metrics([0.8, 0.9], [0.1, 0.2])
        assert out["auc_roc"] == 0.0

    def test_matches_brute_force_rank_count(self):
        gen = np.random.default_rng(7)
        for _ in range(30):
            ins = gen.uniform(size=12).round(1)  # force some ties
            outs = gen.uniform(size=9).round(1)
            got = ood_metrics(ins, outs)["auc_roc"]
            wins = sum((o > i) + 0.5 * (o == i) for i in ins for o in outs)
            np.testing.assert_allclose(got, wins / (12 * 9), atol=1e-12)

    def test_fpr_at_tpr_hand(self):
        ins = np.array([0.1, 0.2, 0.3, 0.9])
        outs = np.array([0.25, 0.5, 0.6, 0.7, 0.8])
        # need ceil(0.95*5)=5 outs above threshold -> threshold 0.25
        # ins >= 0.25: {0.3, 0.9} -> fpr 0.5
        assert ood_metrics(ins, outs)["fpr95"] == 0.5

    def test_fpr_at_precision_flag(self):
        ins = np.array([0.1, 0.2])
        outs = np.array([0.3, 0.4])
        out = ood_metrics(ins, outs, at_precision=True)
        assert out["fpr95"] == 0.0

    def test_scores_from_probs(self):
        p = np.array([[0.9, 0.1], [0.5, 0.5]])
        np.testing.assert_allclose(ood_scores(p), [0.1, 0.5], atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            ood_metrics([], [0.5])


class TestFewshotProbe:
    def gaussian_features(self, gen, m, n_per_class, s, gap=4.0):
        n = 2 * n_per_class
        y = np.repeat([0, 1], n_per_class)
        order = gen.permutation(n)
        y = y[order]
        feats = gen.normal(size=(m, n, s))
        feats[:, y == 1, 0] += gap
        return feats, y

    def test_separable_two_class(self):
        gen = np.random.default_rng(8)
        feats, y = self.gaussian_features(gen, m=1, n_per_class=100, s=8)
        err = fewshot_probe(feats, y, shots=25)
        assert err < 5.0

    def test_single_member_modes_agree(self):
        gen = np.random.default_rng(9)
        feats, y = self.gaussian_features(gen, m=1, n_per_class=40, s=6)
        a = fewshot_probe(feats, y, shots=10, mode="joint")
        b = fewshot_probe(feats, y, shots=10, mode="disjoint")
        assert a == b

    def test_duplicated_members_match_single(self):
        gen = np.random.default_rng(10)
        feats, y = self.gaussian_features(gen, m=1, n_per_class=60, s=6)
        dup = np.concatenate([feats, feats], axis=0)
        a = fewshot_probe(feats, y, shots=20, mode="joint")
        b = fewshot_probe(dup, y, shots=20, mode="joint")
        assert abs(a - b) < 2.0

    def test_disjoint_averages_members(self):
        gen = np.random.default_rng(11)
        feats, y = self.gaussian_features(gen, m=3, n_per_class=60, s=6)
        err = fewshot_probe(feats, y, shots=20, mode="disjoint")
        assert err < 10.0

    def test_insufficient_shots_rejected(self):
        gen = np.random.default_rng(12)
        feats, y = self.gaussian_features(gen, m=1, n_per_class=5, s=4)
        with pytest.raises(ConfigError):
            fewshot_probe(feats, y, shots=10)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            fewshot_probe(np.zeros((1, 10, 2)), np.zeros(10, dtype=int),
                          shots=2, mode="zero_shot")


def random_members(gen, m, n, c):
    raw = gen.uniform(0.05, 1.0, size=(m, n, c))
    return raw / raw.sum(axis=-1, keepdims=True)


class TestAccumulator:
    def test_matches_direct_functions(self):
        gen = np.random.default_rng(13)
        mp = random_members(gen, 3, 40, 4)
        y = gen.integers(0, 4, size=40)
        acc = MetricAccumulator()
        acc.add_batch(mp, y)
        out = acc.result()
        ens = mp.mean(axis=0)
        nll, err = nll_error(ens, y)
        assert out["nll"] == nll
        assert out["error_pct"] == err
        np.testing.assert_allclose(out["ece"], ece(ens, y), atol=1e-15)
        np.testing.assert_allclose(out["kl_diversity"], kl_diversity(mp),
                                   atol=1e-15)
        cos, dis = pair_diversity(mp, y)
        np.testing.assert_allclose(out["cosine_similarity"], cos, atol=1e-15)
        np.testing.assert_allclose(out["normalized_disagreement"], dis,
                                   atol=1e-15)

    def test_merge_equals_single_pass(self):
        gen = np.random.default_rng(14)
        mp = random_members(gen, 2, 30, 3)
        y = gen.integers(0, 3, size=30)
        whole = MetricAccumulator()
        whole.add_batch(mp, y)
        a, b = MetricAccumulator(), MetricAccumulator()
        a.add_batch(mp[:, :13], y[:13])
        b.add_batch(mp[:, 13:], y[13:])
        merged = a.merge(b).result()
        assert merged == whole.result()

    def test_shard_order_does_not_matter(self):
        gen = np.random.default_rng(15)
        mp = random_members(gen, 2, 24, 3)
        y = gen.integers(0, 3, size=24)
        a, b = MetricAccumulator(), MetricAccumulator()
        a.add_batch(mp[:, :8], y[:8])
        b.add_batch(mp[:, 8:], y[8:])
        ab = a.merge(b).result()
        ba = b.merge(a).result()
        for key in ("nll", "error_pct", "ece", "kl_diversity"):
            assert ab[key] == ba[key]

    def test_member_count_change_rejected(self):
        gen = np.random.default_rng(16)
        acc = MetricAccumulator()
        acc.add_batch(random_members(gen, 2, 4, 3),
                      gen.integers(0, 3, size=4))
        with pytest.raises(ConfigError):
            acc.add_batch(random_members(gen, 3, 4, 3),
                          gen.integers(0, 3, size=4))

    def test_empty_result_rejected(self):
        with pytest.raises(ConfigError):
            MetricAccumulator().result()

    def test_jensen_ensemble_vs_members(self):
        gen = np.random.default_rng(17)
        for _ in range(20):
            mp = random_members(gen, 3, 16, 4)
            y = gen.integers(0, 4, size=16)
            acc = MetricAccumulator()
            acc.add_batch(mp, y)
            out = acc.result()
            assert out["nll"] <= out["member_nll"] + 1e-12


class TestEvalReport:
    def test_json_round_trip(self):
        rep = EvalReport(nll=0.5, error_pct=12.5, ece=0.03,
                         kl_diversity=0.01, cosine_similarity=0.9,
                         normalized_disagreement=0.4, flops_train_giga=1.5,
                         ood={"val_vs_shift": {"auc_roc": 0.8,
                                               "auc_pr": 0.7,
                                               "fpr95": 0.3}},
                         fewshot={5: 40.0, 25: 20.0})
        back = EvalReport.from_json(rep.to_json())
        assert back == rep

    def test_none_fields_serialize_empty_csv(self):
        rep = EvalReport(nll=0.5, error_pct=10.0, ece=0.02)
        vals = rep.csv_values()
        assert vals[0] == "0.5"
        assert vals[3] == ""
