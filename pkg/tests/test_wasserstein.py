import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import wasserstein_distance

from domainshift.errors import ActivationError
from domainshift.repshift import wasserstein_1d

from conftest import lcm_quantile_oracle

samples = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=40)


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ([3.0], [7.5], 4.5),
        ([0.0, 1.0], [0.0, 0.0], 0.5),
        ([0.0, 1.0], [0.5], 0.5),
        # lcm oracle: (0,0,1,1,2,2) vs (0,0,0,3,3,3) -> 5/6
        ([0.0, 1.0, 2.0], [0.0, 3.0], 5.0 / 6.0),
    ],
)
def test_known_values(a, b, expected):
    assert wasserstein_1d(a, b) == pytest.approx(expected, abs=1e-15)
    assert lcm_quantile_oracle(a, b) == pytest.approx(expected, abs=1e-15)


def test_identical_lists_give_zero():
    x = np.random.default_rng(1).normal(size=57)
    assert wasserstein_1d(x, x) == 0.0
    assert wasserstein_1d(x, x[::-1]) == 0.0


def test_duplicated_samples_same_distribution():
    x = np.array([0.3, -1.0, 2.5])
    assert wasserstein_1d(x, np.repeat(x, 4)) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("bad", [[], [1.0, np.nan], [np.inf]])
def test_rejects_empty_or_non_finite(bad):
    with pytest.raises(ActivationError):
        wasserstein_1d(bad, [1.0])
    with pytest.raises(ActivationError):
        wasserstein_1d([1.0], bad)


@settings(max_examples=200, deadline=None)
@given(samples, samples)
def test_matches_oracle_and_scipy(a, b):
    w = wasserstein_1d(a, b)
    assert w == pytest.approx(lcm_quantile_oracle(a, b), abs=1e-9)
    assert w == pytest.approx(wasserstein_distance(a, b), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(samples, samples, st.floats(-50, 50), st.floats(-5, 5))
def test_shift_and_scale(a, b, c, k):
    a, b = np.array(a), np.array(b)
    w = wasserstein_1d(a, b)
    assert wasserstein_1d(a + c, b + c) == pytest.approx(w, abs=1e-9)
    assert wasserstein_1d(k * a, k * b) == pytest.approx(abs(k) * w, rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(samples, samples, samples)
def test_triangle_and_symmetry(a, b, c):
    ab, bc, ac = wasserstein_1d(a, b), wasserstein_1d(b, c), wasserstein_1d(a, c)
    assert ab == wasserstein_1d(b, a)
    assert ac <= ab + bc + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_equal_sizes_is_mean_sorted_gap(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-10, 10, n), rng.uniform(-10, 10, n)
    ref = np.mean(np.abs(np.sort(a) - np.sort(b)))
    assert wasserstein_1d(a, b) == pytest.approx(ref, rel=1e-12, abs=1e-300)
