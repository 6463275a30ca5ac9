import numpy as np
import pytest

from arq import data, nn
from arq.certify import (RADIUS_GRID, CacheEntry, CacheMissError, CertCache,
                         CertificationRecord, certified_accuracy,
                         certify_dataset, certify_input, incremental_certify,
                         load_cache, make_report, records_from_csv,
                         records_to_csv, sample_counts, save_cache)
from arq.quantize import apply_policy, uniform_policy
from arq.search import make_classifier, make_quantized_classifier
from arq.stats import inv_norm_cdf


def constant_classifier(cls=0):
    return lambda xb: np.full(len(xb), cls, dtype=np.int32)


def threshold_classifier(xb):
    """f(x) = 1 if the first coordinate is positive."""
    flat = np.asarray(xb).reshape(len(xb), -1)
    return (flat[:, 0] > 0).astype(np.int32)


def rng_for(seed):
    return np.random.default_rng(np.random.SeedSequence(seed))


def record(input_id=0, label=0, predicted=0, p=0.9, sigma=0.25, abstain=False):
    radius = sigma * inv_norm_cdf(p) if not abstain else 0.0
    return CertificationRecord(input_id, label, predicted, p, radius, abstain,
                               100, sigma, 0.001)


class TestSampleCounts:
    def test_sigma_zero_concentrates(self):
        counts = sample_counts(threshold_classifier, np.array([2.0, 0.0]), 0.0,
                               50, rng_for(0), 2)
        assert counts.tolist() == [0, 50]

    def test_constant_classifier(self):
        counts = sample_counts(constant_classifier(0), np.zeros(3), 0.5, 40,
                               rng_for(1), 3)
        assert counts[0] == 40 and counts.sum() == 40

    def test_counts_sum(self):
        counts = sample_counts(threshold_classifier, np.array([0.1, 0.0]), 1.0,
                               1234, rng_for(2), 2)
        assert counts.sum() == 1234

    def test_analytic_probability(self):
        # f(x+eps) = 1[x1+eps1 > 0] with x1 = sigma: P[class 1] = Phi(1)
        sigma, n = 0.5, 10_000
        counts = sample_counts(threshold_classifier, np.array([sigma, 0.0]),
                               sigma, n, rng_for(3), 2)
        p_hat = counts[1] / n
        p_true = 0.8413447460685429
        se = np.sqrt(p_true * (1 - p_true) / n)
        assert abs(p_hat - p_true) <= 3 * se

    def test_bad_args(self):
        with pytest.raises(ValueError):
            sample_counts(constant_classifier(), np.zeros(2), 0.1, 0, rng_for(0), 2)
        with pytest.raises(ValueError):
            sample_counts(constant_classifier(), np.zeros(2), -0.1, 5, rng_for(0), 2)


class TestCertifyInput:
    def test_constant_classifier_closed_form(self):
        n, alpha, sigma = 1000, 0.001, 0.5
        rec = certify_input(constant_classifier(2), np.zeros(4), sigma, 100, n,
                            alpha, rng_for(0), 3)
        p_expected = alpha ** (1.0 / n)
        assert rec.predicted == 2
        assert not rec.abstain
        assert rec.p_lower == pytest.approx(p_expected, abs=1e-12)
        assert rec.radius == pytest.approx(sigma * inv_norm_cdf(p_expected), abs=1e-12)

    def test_coin_flip_classifier_abstains(self):
        # true top-class probability 1/2 -> the lower bound clears 0.5 with
        # probability <= alpha; over 50 runs nearly all must abstain
        abstains = 0
        for i in range(50):
            rec = certify_input(threshold_classifier, np.array([0.0, 0.0]), 0.3,
                                50, 400, 0.01, rng_for(1000 + i), 2)
            abstains += rec.abstain
        assert abstains >= 48

    def test_sigma_zero_deterministic_classifier(self):
        rec = certify_input(constant_classifier(1), np.zeros(2), 0.0, 32, 500,
                            0.001, rng_for(5), 2, label=1)
        assert rec.p_lower == pytest.approx(0.001 ** (1 / 500), abs=1e-12)
        assert rec.radius == 0.0  # sigma = 0 certifies a zero-radius ball
        assert rec.correct

    def test_record_invariants(self):
        rec = certify_input(constant_classifier(0), np.zeros(2), 0.25, 32, 200,
                            0.01, rng_for(6), 2, label=0)
        assert rec.p_lower > 0.5 and rec.radius > 0
        assert rec.n_used == 200


class TestReports:
    def test_acr_single_record(self):
        rep = make_report([record(p=0.975, sigma=0.25)])
        assert rep.acr == pytest.approx(0.25 * 1.959963984540054, abs=1e-9)
        assert rep.acr == pytest.approx(0.489991, abs=1e-6)

    def test_all_abstain_acr_zero(self):
        rep = make_report([record(abstain=True) for _ in range(5)])
        assert rep.acr == 0.0

    def test_misclassified_contributes_zero(self):
        recs = [record(label=0, predicted=1, p=0.99), record(label=0, predicted=0, p=0.9)]
        rep = make_report(recs)
        assert rep.acr == pytest.approx(0.5 * 0.25 * inv_norm_cdf(0.9), abs=1e-12)

    def test_duplication_invariance(self):
        recs = [record(input_id=i, p=0.8 + 0.03 * i) for i in range(4)]
        assert make_report(recs).acr == pytest.approx(make_report(recs * 2).acr, abs=1e-15)

    def test_reorder_invariance(self):
        recs = [record(input_id=i, p=0.8 + 0.03 * i) for i in range(4)]
        assert make_report(recs).acr == make_report(recs[::-1]).acr

    def test_certified_accuracy_grid(self):
        recs = [record(p=0.99, sigma=1.0), record(abstain=True),
                record(p=0.9, sigma=1.0, label=1)]  # last one incorrect
        # radii: 2.326, abstain, (incorrect)
        assert certified_accuracy(recs, 0.0) == pytest.approx(1 / 3)
        assert certified_accuracy(recs, 2.0) == pytest.approx(1 / 3)
        assert certified_accuracy(recs, 2.5) == 0.0
        curve = [certified_accuracy(recs, r) for r in RADIUS_GRID]
        assert all(a >= b for a, b in zip(curve, curve[1:]))

    def test_clean_accuracy_is_r0(self):
        recs = [record(p=0.9), record(abstain=True)]
        rep = make_report(recs)
        assert rep.clean_accuracy == certified_accuracy(recs, 0.0) == 0.5


class TestCertifyDataset:
    def test_duplicated_inputs_same_ids_identical(self):
        X = np.array([[0.5, 0.0], [0.3, 0.1]])
        Y = np.array([1, 1])
        rep1, _ = certify_dataset(threshold_classifier, X, Y, 0.25, 300, 0.01,
                                  7, 2)
        rep2, _ = certify_dataset(threshold_classifier, np.vstack([X, X]),
                                  np.hstack([Y, Y]), 0.25, 300, 0.01, 7, 2,
                                  input_ids=[0, 1, 0, 1])
        assert rep2.acr == pytest.approx(rep1.acr, abs=1e-15)

    def test_thread_count_invariance(self):
        X = np.array([[0.4, 0.0], [0.2, 0.3], [0.8, -0.1], [0.05, 0.0]])
        Y = np.array([1, 1, 1, 1])
        rep1, cache1 = certify_dataset(threshold_classifier, X, Y, 0.25, 500,
                                       0.01, 3, 2, trace_n=100, threads=1)
        rep4, cache4 = certify_dataset(threshold_classifier, X, Y, 0.25, 500,
                                       0.01, 3, 2, trace_n=100, threads=4)
        assert records_to_csv(rep1.records) == records_to_csv(rep4.records)
        for i in cache1.entries:
            assert np.array_equal(cache1.entries[i].trace, cache4.entries[i].trace)

    def test_cache_contents(self):
        X = np.array([[0.9, 0.0]])
        Y = np.array([1])
        rep, cache = certify_dataset(threshold_classifier, X, Y, 0.25, 400,
                                     0.01, 11, 2, trace_n=150)
        assert cache.sigma == 0.25 and cache.n0 == 400 and cache.trace_n == 150
        entry = cache.entries[0]
        assert entry.predicted == rep.records[0].predicted
        assert entry.p_lower == rep.records[0].p_lower
        assert len(entry.trace) == 150


class TestIncrementalCertify:
    def setup_method(self):
        self.X = np.array([[0.7, 0.0], [0.5, 0.2], [1.2, -0.3]])
        self.Y = np.array([1, 1, 1])
        self.rep, self.cache = certify_dataset(
            threshold_classifier, self.X, self.Y, 0.25, 800, 0.001, 21, 2,
            trace_n=200)

    def test_identical_model_zero_disagreements(self):
        n, alpha_z = 200, 0.001
        rep = incremental_certify(threshold_classifier, self.cache, self.X,
                                  self.Y, 0.25, n, alpha_z, 2)
        zeta = 1.0 - alpha_z ** (1.0 / n)
        for rec, orig in zip(rep.records, self.rep.records):
            assert rec.p_lower == pytest.approx(orig.p_lower - zeta, abs=1e-12)
            if not rec.abstain:
                expected = 0.25 * inv_norm_cdf(orig.p_lower - zeta)
                assert rec.radius == pytest.approx(expected, abs=1e-12)

    def test_always_disagreeing_model_abstains(self):
        flipped = lambda xb: 1 - threshold_classifier(xb)
        rep = incremental_certify(flipped, self.cache, self.X, self.Y, 0.25,
                                  200, 0.001, 2)
        assert all(r.abstain for r in rep.records)
        assert rep.acr == 0.0

    def test_radius_never_exceeds_cached(self):
        noisy = lambda xb: (np.asarray(xb).reshape(len(xb), -1)[:, 0] > 0.05).astype(np.int32)
        rep = incremental_certify(noisy, self.cache, self.X, self.Y, 0.25,
                                  200, 0.001, 2)
        for rec, orig in zip(rep.records, self.rep.records):
            assert rec.radius <= orig.radius + 1e-12

    def test_cache_miss_names_input(self):
        with pytest.raises(CacheMissError, match="7"):
            incremental_certify(threshold_classifier, self.cache, self.X,
                                self.Y, 0.25, 200, 0.001, 2, input_ids=[0, 1, 7])

    def test_sigma_mismatch(self):
        with pytest.raises(ValueError, match="sigma"):
            incremental_certify(threshold_classifier, self.cache, self.X,
                                self.Y, 0.5, 200, 0.001, 2)

    def test_n_beyond_trace(self):
        with pytest.raises(ValueError, match="trace"):
            incremental_certify(threshold_classifier, self.cache, self.X,
                                self.Y, 0.25, 500, 0.001, 2)

    def test_fallback_re_certifies(self):
        flipped = lambda xb: 1 - threshold_classifier(xb)
        rep = incremental_certify(flipped, self.cache, self.X, self.Y, 0.25,
                                  200, 0.001, 2, fallback=True)
        # the flipped model is itself confidently wrong under noise: fresh
        # certification certifies class 0 instead of abstaining
        assert any(not r.abstain for r in rep.records)
        assert all(r.predicted == 0 for r in rep.records if not r.abstain)


class TestSoundness:
    def test_claimed_radius_rarely_exceeds_truth(self):
        # known ground truth: p* = Phi(x1/sigma), true radius sigma*Phi^-1(p*)
        sigma, alpha, runs = 0.5, 0.01, 200
        x = np.array([sigma, 0.0])
        true_radius = sigma * 1.0  # Phi^-1(Phi(1)) = 1
        exceed = 0
        for i in range(runs):
            rec = certify_input(threshold_classifier, x, sigma, 100, 1000,
                                alpha, rng_for(50_000 + i), 2)
            if not rec.abstain and rec.radius > true_radius:
                exceed += 1
        bound = alpha + 3 * np.sqrt(alpha * (1 - alpha) / runs)
        assert exceed / runs <= bound


class TestPersistence:
    def test_records_csv_golden(self):
        rec = CertificationRecord(3, 1, 1, 0.9375, 0.375, False, 200, 0.25, 0.001)
        text = records_to_csv([rec])
        assert text == (
            "input_id,label,predicted,p_lower,radius,abstain,correct,n,sigma,alpha\n"
            "3,1,1,0.9375,0.375,0,1,200,0.25,0.001\n")
        back = records_from_csv(text)
        assert back[0] == rec

    def test_cache_roundtrip(self, tmp_path):
        cache = CertCache(0.25, 0.001, 42, 400, 3)
        cache.entries[0] = CacheEntry(2, 0.93, 400, np.array([2, 2, 1], dtype=np.int32))
        cache.entries[5] = CacheEntry(0, 0.51, 400, np.array([0, 0, 0], dtype=np.int32))
        path = tmp_path / "c.arqcache"
        save_cache(cache, path)
        loaded = load_cache(path)
        assert loaded.sigma == cache.sigma and loaded.seed == cache.seed
        assert loaded.trace_n == 3
        for k in cache.entries:
            assert loaded.entries[k].predicted == cache.entries[k].predicted
            assert loaded.entries[k].p_lower == cache.entries[k].p_lower
            assert np.array_equal(loaded.entries[k].trace, cache.entries[k].trace)

    def test_cache_bad_magic(self, tmp_path):
        path = tmp_path / "bad.arqcache"
        path.write_bytes(b"NOTACACHExxxxxxxxxxx")
        with pytest.raises(ValueError, match="magic"):
            load_cache(path)

    def test_cache_truncated(self, tmp_path):
        cache = CertCache(0.25, 0.001, 42, 400, 3)
        cache.entries[0] = CacheEntry(2, 0.93, 400, np.array([2, 2, 1], dtype=np.int32))
        path = tmp_path / "c.arqcache"
        save_cache(cache, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 6])
        with pytest.raises(ValueError):
            load_cache(path)
