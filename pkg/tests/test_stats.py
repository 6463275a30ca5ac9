"""Oracles for the statistical kernels.

The Gaussian quantile is checked by round-trip through the erfc-based CDF and
against frozen high-precision reference values; the Clopper-Pearson bounds are
checked against closed forms and an independent refined grid search on the
binomial tail sum.
"""

import math

import numpy as np
import pytest

from arq.stats import (binom_lower_bound, binom_upper_bound, inv_norm_cdf,
                       norm_cdf, reg_inc_beta)


def binom_tail_geq(k: int, n: int, p: float) -> float:
    """P[Binomial(n, p) >= k] by direct summation (independent oracle)."""
    return sum(math.comb(n, j) * p**j * (1 - p) ** (n - j) for j in range(k, n + 1))


def grid_search_lower(k: int, n: int, alpha: float, resolution=1e-7) -> float:
    """Refine a grid to ``resolution`` for the p with P[Bin(n,p) >= k] = alpha."""
    lo, hi = 0.0, 1.0
    js = np.arange(k, n + 1)
    log_comb = np.array([math.lgamma(n + 1) - math.lgamma(j + 1) - math.lgamma(n - j + 1)
                         for j in js])
    step = (hi - lo) / 100
    while step > resolution / 10:
        ps = np.arange(lo, hi + step, step)
        ps = np.clip(ps, 1e-12, 1 - 1e-12)
        with np.errstate(divide="ignore"):
            tails = np.exp(log_comb[None, :] + js[None, :] * np.log(ps)[:, None]
                           + (n - js)[None, :] * np.log1p(-ps)[:, None]).sum(axis=1)
        idx = int(np.searchsorted(tails, alpha))
        idx = min(max(idx, 1), len(ps) - 1)
        lo, hi = ps[idx - 1], ps[idx]
        step = (hi - lo) / 100
    return 0.5 * (lo + hi)


class TestNormCdf:
    def test_symmetry_and_known_points(self):
        assert norm_cdf(0.0) == 0.5
        assert abs(norm_cdf(1.0) - 0.8413447460685429) < 1e-12
        assert abs(norm_cdf(-1.959963984540054) - 0.025) < 1e-12


class TestInvNormCdf:
    def test_median(self):
        assert inv_norm_cdf(0.5) == 0.0

    def test_frozen_references(self):
        # mpmath-verified quantiles
        assert abs(inv_norm_cdf(0.975) - 1.959963984540054) < 1e-9
        assert abs(inv_norm_cdf(0.9) - 1.2815515655446004) < 1e-9
        assert abs(inv_norm_cdf(0.8413447460685429) - 1.0) < 1e-9

    def test_round_trip_grid(self):
        ps = np.linspace(1e-6, 1 - 1e-6, 10_000)
        worst = max(abs(norm_cdf(inv_norm_cdf(p)) - p) for p in ps)
        assert worst <= 1e-9

    def test_odd_symmetry(self):
        for p in (0.6, 0.75, 0.9, 0.975, 0.999, 0.9999999):
            assert inv_norm_cdf(1 - p) == pytest.approx(-inv_norm_cdf(p), abs=1e-12)

    def test_domain_errors(self):
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                inv_norm_cdf(bad)


class TestRegIncBeta:
    def test_matches_binomial_tail(self):
        # I_p(k, n-k+1) = P[Bin(n,p) >= k]
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 40))
            k = int(rng.integers(1, n + 1))
            p = float(rng.uniform(0.01, 0.99))
            assert reg_inc_beta(p, k, n - k + 1) == pytest.approx(
                binom_tail_geq(k, n, p), abs=1e-12)


class TestBinomLowerBound:
    def test_closed_forms(self):
        assert binom_lower_bound(0, 10, 0.01) == 0.0
        assert abs(binom_lower_bound(100, 100, 0.001) - 0.001 ** 0.01) < 1e-9
        assert abs(binom_lower_bound(100, 100, 0.001) - 0.933254300796991) < 1e-6
        assert abs(binom_lower_bound(7, 7, 0.05) - 0.05 ** (1 / 7)) < 1e-9

    def test_defining_equation(self):
        p = binom_lower_bound(5, 10, 0.5)
        assert binom_tail_geq(5, 10, p) == pytest.approx(0.5, abs=1e-8)

    def test_against_grid_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            n = int(rng.integers(2, 51))
            k = int(rng.integers(1, n))
            alpha = float(rng.uniform(0.001, 0.5))
            assert binom_lower_bound(k, n, alpha) == pytest.approx(
                grid_search_lower(k, n, alpha), abs=1e-6)

    def test_monotone_in_k_and_alpha(self):
        lows = [binom_lower_bound(k, 20, 0.05) for k in range(21)]
        assert all(a <= b + 1e-12 for a, b in zip(lows, lows[1:]))
        by_alpha = [binom_lower_bound(12, 20, a) for a in (0.001, 0.01, 0.1, 0.5)]
        assert all(a <= b + 1e-12 for a, b in zip(by_alpha, by_alpha[1:]))

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            binom_lower_bound(-1, 10, 0.05)
        with pytest.raises(ValueError):
            binom_lower_bound(11, 10, 0.05)
        with pytest.raises(ValueError):
            binom_lower_bound(5, 10, 0.0)


class TestBinomUpperBound:
    def test_closed_forms(self):
        assert binom_upper_bound(10, 10, 0.01) == 1.0
        assert abs(binom_upper_bound(0, 200, 0.001)
                   - (1.0 - 0.001 ** (1 / 200))) < 1e-9

    def test_defining_equation(self):
        p = binom_upper_bound(3, 12, 0.05)
        # P[Bin(12, p) <= 3] = 0.05
        cdf = sum(math.comb(12, j) * p**j * (1 - p) ** (12 - j) for j in range(4))
        assert cdf == pytest.approx(0.05, abs=1e-8)

    def test_brackets_the_empirical_rate(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(1, 60))
            k = int(rng.integers(0, n + 1))
            alpha = float(rng.uniform(0.001, 0.5))
            lo = binom_lower_bound(k, n, alpha)
            hi = binom_upper_bound(k, n, alpha)
            assert lo <= k / n + 1e-12
            assert k / n <= hi + 1e-12
