import itertools
import math

import numpy as np
import pytest

from huclab import (
    CorpusConfig,
    EncoderArch,
    ProbeConfig,
    SignalTransform,
    abx_score,
    bootstrap_ci,
    cluster_purity,
    dedup,
    dtw_angular,
    gen_corpus,
    init_params,
    levenshtein,
    linear_probe,
    make_abx_triplets,
    ued,
)
from huclab.cluster import Codebook
from huclab.corpus import SegmentRef, Triplet, TripletSet
from huclab.encoder import encode
from huclab.evaluate import _angular_cost_matrix


# --- DTW ---------------------------------------------------------------------


def _enumerate_paths(n, m):
    """All monotone step-{(1,0),(0,1),(1,1)} paths from (0,0) to (n-1,m-1)."""
    paths = []

    def extend(path):
        i, j = path[-1]
        if (i, j) == (n - 1, m - 1):
            paths.append(list(path))
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                path.append((i + di, j + dj))
                extend(path)
                path.pop()

    extend([(0, 0)])
    return paths


def _oracle_dtw(seq_a, seq_b):
    cost = _angular_cost_matrix(np.atleast_2d(seq_a), np.atleast_2d(seq_b))
    best_cost, best_len = np.inf, None
    for path in _enumerate_paths(*cost.shape):
        total = 0.0
        for i, j in path:
            total += cost[i, j]
        if total < best_cost:
            best_cost, best_len = total, len(path)
    return best_cost / best_len


class TestDtwAngular:
    def test_identical_sequences_distance_zero(self):
        seq = np.random.default_rng(0).standard_normal((5, 3))
        assert dtw_angular(seq, seq) == 0.0

    def test_orthogonal_single_frames(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[0.0, 1.0]])
        assert dtw_angular(a, b) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_path_enumeration_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((4, 2))
        assert dtw_angular(a, b) == pytest.approx(_oracle_dtw(a, b), abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            a = rng.standard_normal((rng.integers(1, 5), 3))
            b = rng.standard_normal((rng.integers(1, 5), 3))
            assert dtw_angular(a, b) == dtw_angular(b, a)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dtw_angular(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_zero_norm_frame_uses_epsilon_guard(self):
        a = np.zeros((1, 3))
        b = np.ones((1, 3))
        assert dtw_angular(a, b) == pytest.approx(0.5, abs=1e-12)


# --- ABX ---------------------------------------------------------------------


def _ref(utt, start, length, phone=0, speaker=0):
    return SegmentRef(utt, start, length, phone, speaker)


class TestAbxScore:
    def _toy_triplets(self):
        items = [
            Triplet(a=_ref("a", 0, 2), b=_ref("b", 0, 2), x=_ref("x", 0, 2))
            for _ in range(1)
        ]
        return TripletSet(items=items, mode="within")

    def test_perfect_one_hot_features_zero_error(self, tiny_corpus):
        num_phonemes = 3
        features = {
            sig.utterance_id: np.eye(num_phonemes)[sig.frame_phones] for sig in tiny_corpus
        }
        for mode in ("within", "across"):
            triplets = make_abx_triplets(tiny_corpus, mode, 200, seed=1)
            report = abx_score(triplets, features)
            assert report.error_rate == 0.0

    def test_constant_features_all_ties(self, tiny_corpus):
        features = {
            sig.utterance_id: np.ones((sig.num_frames, 4)) for sig in tiny_corpus
        }
        triplets = make_abx_triplets(tiny_corpus, "within", 50, seed=2)
        report = abx_score(triplets, features)
        assert report.error_rate == 0.5
        assert all(v == 0.5 for v in report.per_item)

    def test_matches_per_triplet_oracle(self, tiny_corpus):
        rng = np.random.default_rng(3)
        features = {
            sig.utterance_id: rng.standard_normal((sig.num_frames, 5)) for sig in tiny_corpus
        }
        triplets = make_abx_triplets(tiny_corpus, "within", 10, seed=3)
        report = abx_score(triplets, features)
        expected = []
        for item in triplets.items:
            def seg(ref):
                return features[ref.utterance_id][ref.frame_start : ref.frame_start + ref.frame_len]
            d_ax = dtw_angular(seg(item.a), seg(item.x))
            d_bx = dtw_angular(seg(item.b), seg(item.x))
            expected.append(1.0 if d_ax > d_bx else (0.5 if d_ax == d_bx else 0.0))
        assert report.per_item == expected
        assert report.error_rate == pytest.approx(np.mean(expected), abs=1e-12)

    def test_scale_invariance(self, tiny_corpus):
        rng = np.random.default_rng(4)
        features = {
            sig.utterance_id: rng.standard_normal((sig.num_frames, 4)) for sig in tiny_corpus
        }
        scaled = {u: 7.5 * mat for u, mat in features.items()}
        triplets = make_abx_triplets(tiny_corpus, "across", 40, seed=4)
        assert abx_score(triplets, features).error_rate == abx_score(triplets, scaled).error_rate

    def test_empty_triplets_rejected(self):
        with pytest.raises(ValueError):
            abx_score(TripletSet(items=[], mode="within"), {})


# --- purity --------------------------------------------------------------------


class TestClusterPurity:
    def test_pure_clusters(self):
        assert cluster_purity([0, 0, 1, 1], [5, 5, 9, 9]) == 1.0

    def test_half_mixed(self):
        assert cluster_purity([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(5)
        clusters = rng.integers(0, 4, size=50)
        speakers = rng.integers(0, 3, size=50)
        total = 0
        for c in set(clusters.tolist()):
            members = speakers[clusters == c].tolist()
            total += max(members.count(s) for s in set(members))
        assert cluster_purity(clusters, speakers) == pytest.approx(total / 50, abs=1e-12)

    def test_single_cluster_equals_max_speaker_frequency(self):
        speakers = [0, 0, 0, 1, 1, 2]
        assert cluster_purity([0] * 6, speakers) == pytest.approx(3 / 6, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cluster_purity([], [])


# --- linear probe -----------------------------------------------------------------


class TestLinearProbe:
    def test_separable_blobs(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-3, 0.3, (100, 2)), rng.normal(3, 0.3, (100, 2))])
        y = np.array([0] * 100 + [1] * 100)
        assert linear_probe(x, y, ProbeConfig(seed=1)) >= 0.99

    def test_permuted_labels_near_chance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((300, 4))
        y = rng.integers(0, 3, size=300)  # independent of x by construction
        acc = linear_probe(x, y, ProbeConfig(seed=2))
        assert abs(acc - 1 / 3) <= 0.15

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        x = np.repeat(rng.standard_normal((40, 3)), 2, axis=0)
        y = np.repeat(rng.integers(0, 2, size=40), 2)
        a = linear_probe(x, y, ProbeConfig(seed=3))
        b = linear_probe(x, y, ProbeConfig(seed=3))
        assert a == b

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            linear_probe(np.zeros((4, 2)), np.zeros(4, dtype=int), ProbeConfig())


# --- sequence metrics ----------------------------------------------------------------


class TestDedup:
    def test_adjacent_repeats_collapse(self):
        assert dedup([12, 12, 34, 34, 52]) == [12, 34, 52]

    def test_empty(self):
        assert dedup([]) == []

    def test_non_adjacent_repeats_kept(self):
        assert dedup([1, 2, 1]) == [1, 2, 1]

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            seq = rng.integers(0, 3, size=rng.integers(0, 12)).tolist()
            once = dedup(seq)
            assert dedup(once) == once


def _oracle_levenshtein(a, b):
    """Full-matrix DP, kept independent of the two-row implementation."""
    n, m = len(a), len(b)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dp[i][0] = i
    for j in range(m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dp[i][j] = min(
                dp[i - 1][j] + 1,
                dp[i][j - 1] + 1,
                dp[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
            )
    return dp[n][m]


class TestLevenshtein:
    def test_classic_instance(self):
        # integer-coded "kitten" vs "sitting"
        coding = {ch: i for i, ch in enumerate("kitensg")}
        a = [coding[ch] for ch in "kitten"]
        b = [coding[ch] for ch in "sitting"]
        assert levenshtein(a, b) == 3
        assert _oracle_levenshtein(a, b) == 3

    def test_identity_and_empty(self):
        seq = [1, 2, 3, 1]
        assert levenshtein(seq, seq) == 0
        assert levenshtein(seq, []) == len(seq)
        assert levenshtein([], seq) == len(seq)

    def test_matches_dp_oracle_on_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = rng.integers(0, 4, size=rng.integers(0, 9)).tolist()
            b = rng.integers(0, 4, size=rng.integers(0, 9)).tolist()
            assert levenshtein(a, b) == _oracle_levenshtein(a, b)

    def test_metric_properties(self):
        # symmetry exhaustively for all sequence pairs up to length 2 over
        # alphabet 3; triangle inequality on seeded random triples up to
        # length 5 (the full triple product is far too large to enumerate)
        short = [
            list(s)
            for n in range(3)
            for s in itertools.product(range(3), repeat=n)
        ]
        for a in short:
            for b in short:
                assert levenshtein(a, b) == levenshtein(b, a)
                assert (levenshtein(a, b) == 0) == (a == b)
        rng = np.random.default_rng(2)
        for _ in range(300):
            a, b, c = (
                rng.integers(0, 3, size=rng.integers(0, 6)).tolist() for _ in range(3)
            )
            assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


# --- UED -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ued_setup():
    corpus = gen_corpus(
        CorpusConfig(
            num_speakers=2,
            num_phonemes=4,
            utterances_per_speaker=3,
            phones_per_utterance=5,
            frames_per_phone=2,
            samples_per_frame=24,
            seed=31,
        )
    )
    arch = EncoderArch(conv_layers=((4, 4, 8), (3, 3, 10), (2, 2, 12)), recurrent_layers=1, hidden_dim=12)
    params = init_params(arch, 0, future_steps=2, num_classes=4)
    rng = np.random.default_rng(40)
    codebook = Codebook(centroids=rng.standard_normal((5, 12)), inertia_history=[], seed=40)
    return corpus, params, codebook


class TestUed:
    def test_identity_transform_zero(self, ued_setup):
        corpus, params, codebook = ued_setup
        report = ued(corpus, params, codebook, SignalTransform("identity", 0.0), seed=0)
        assert report.ued == 0.0
        assert all(v == 0.0 for v in report.per_utterance.values())

    def test_noise_monotonicity(self, ued_setup):
        corpus, params, codebook = ued_setup
        low = ued(corpus, params, codebook, SignalTransform("feature_noise", 0.5), seed=1)
        high = ued(corpus, params, codebook, SignalTransform("feature_noise", 1.0), seed=1)
        assert high.ued >= low.ued

    def test_manual_trace_single_utterance(self, ued_setup):
        from huclab.cluster import assign_labels, mean_normalize
        from huclab.evaluate import dedup as _dedup
        from huclab.util import derive_seed

        corpus, params, codebook = ued_setup
        sig = corpus[0]
        transform = SignalTransform("gain", 3.0)
        seed = 9
        report = ued([sig], params, codebook, transform, seed=seed)
        # independent recomputation of the pipeline for this one utterance
        rng = np.random.default_rng(derive_seed(seed, "ued", 0))
        perturbed = transform.apply(sig.samples.astype(float), params.arch.total_stride, rng)
        _, c_clean = encode(params, sig.samples)
        _, c_pert = encode(params, perturbed)
        clean_units = _dedup(assign_labels(mean_normalize(c_clean), codebook))
        pert_units = _dedup(assign_labels(mean_normalize(c_pert), codebook))
        expected = 1000.0 * _oracle_levenshtein(clean_units, pert_units) / len(clean_units)
        assert report.per_utterance[sig.utterance_id] == pytest.approx(expected, abs=1e-12)

    def test_empty_corpus_rejected(self, ued_setup):
        _, params, codebook = ued_setup
        with pytest.raises(ValueError):
            ued([], params, codebook, SignalTransform("identity", 0.0), seed=0)

    def test_frame_dropout_transform_zeroes_blocks(self):
        samples = np.ones(8 * 3)
        out = SignalTransform("frame_dropout", 1.0).apply(
            samples, 3, np.random.default_rng(0)
        )
        np.testing.assert_array_equal(out, 0.0)

    def test_unknown_transform_rejected(self):
        with pytest.raises(ValueError):
            SignalTransform("reverb", 1.0)


# --- bootstrap -----------------------------------------------------------------------


class TestBootstrapCi:
    def test_degenerate_all_zero(self):
        result = bootstrap_ci([(0.0, 0.0)] * 4, resamples=50, seed=0)
        assert result.ci1 == (0.0, 0.0)
        assert result.ci2 == (0.0, 0.0)
        assert result.poi == 0.0

    def test_dominant_model_poi_one(self):
        pairs = [(0.5, 0.1), (0.6, 0.2), (0.4, 0.3)]
        result = bootstrap_ci(pairs, resamples=64, seed=1)
        assert result.poi == 1.0

    def test_matches_enumeration_oracle(self):
        # replay the documented RNG protocol; check each resample against the
        # enumerated multiset statistics and the final percentiles/POI
        pairs = np.array([(0.9, 0.1), (0.5, 0.7), (0.3, 0.2)])
        resamples, seed = 8, 5
        result = bootstrap_ci(pairs, resamples, seed)

        multiset_stats = {}
        for combo in itertools.product(range(3), repeat=3):
            multiset_stats[combo] = pairs[list(combo)].mean(axis=0)

        rng = np.random.default_rng(seed)
        stats = []
        for _ in range(resamples):
            idx = tuple(rng.integers(0, 3, size=3).tolist())
            assert idx in multiset_stats
            stats.append(multiset_stats[idx])
        stats = np.array(stats)
        ci = np.percentile(stats, [2.5, 97.5], axis=0)
        assert result.ci1 == pytest.approx((ci[0, 0], ci[1, 0]), abs=1e-9)
        assert result.ci2 == pytest.approx((ci[0, 1], ci[1, 1]), abs=1e-9)
        assert result.poi == pytest.approx((stats[:, 1] < stats[:, 0]).mean(), abs=1e-12)

    def test_deterministic(self):
        pairs = [(0.2, 0.3), (0.4, 0.1)]
        a = bootstrap_ci(pairs, 100, seed=3)
        b = bootstrap_ci(pairs, 100, seed=3)
        assert (a.ci1, a.ci2, a.poi) == (b.ci1, b.ci2, b.poi)

    def test_validation(self):
        with pytest.raises(ValueError):
            bootstrap_ci(np.zeros((0, 2)), 10, 0)
        with pytest.raises(ValueError):
            bootstrap_ci([(0.1, 0.2)], 0, 0)
