"""Span mask sampler: counts, coverage, reproducibility, invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradmask.masking import MaskPlan, expected_coverage, n_starts, sample_mask
from gradmask.seeds import substream


def test_start_count_formula():
    assert n_starts(100, 0.065) == 6  # round(6.5) -> 6 (banker's rounding)
    assert n_starts(200, 0.065) == 13
    assert n_starts(10, 0.065) == 1
    assert n_starts(4, 0.065) == 1  # floor of the formula would be 0; min is 1
    assert n_starts(1, 0.5) == 1
    assert n_starts(30, 0.1) == 3


def test_expected_coverage_frozen_values():
    assert expected_coverage(0.065, 10) == pytest.approx(0.48935849815457155, abs=1e-12)
    assert expected_coverage(0.065, 3) == pytest.approx(0.18259962499999982, abs=1e-12)


def test_sample_shapes_and_clipping():
    rng = substream(0, "mask")
    plan = sample_mask(20, 0.3, 7, rng)
    assert plan.length == 20
    assert plan.mask.shape == (20,)
    assert plan.mask.dtype == bool
    assert plan.n_masked >= 1
    # starts are sorted, unique, in range
    assert np.all(np.diff(plan.starts) > 0)
    assert plan.starts.min() >= 0 and plan.starts.max() < 20


def test_mask_is_union_of_clipped_spans():
    rng = substream(1, "mask")
    for _ in range(50):
        T = int(rng.integers(1, 40))
        m = int(rng.integers(1, 8))
        plan = sample_mask(T, 0.2, m, rng)
        rebuilt = np.zeros(T, dtype=bool)
        for s in plan.starts:
            rebuilt[s : s + m] = True
        assert np.array_equal(plan.mask, rebuilt)


def test_monte_carlo_coverage_matches_formula():
    p, m, T = 0.065, 10, 200
    rng = substream(2, "mask")
    cov = np.mean([sample_mask(T, p, m, rng).coverage for _ in range(3000)])
    assert abs(cov - expected_coverage(p, m)) < 0.02


def test_monte_carlo_coverage_short_spans():
    p, m, T = 0.065, 3, 150
    rng = substream(3, "mask")
    cov = np.mean([sample_mask(T, p, m, rng).coverage for _ in range(3000)])
    assert abs(cov - expected_coverage(p, m)) < 0.02


def test_monte_carlo_coverage_dense_starts():
    p, m, T = 0.2, 2, 120
    rng = substream(5, "mask")
    cov = np.mean([sample_mask(T, p, m, rng).coverage for _ in range(3000)])
    assert abs(cov - expected_coverage(p, m)) < 0.02


def test_start_positions_are_uniform():
    # counts per position over many draws stay within 5 sigma of uniform
    T, n_draws = 50, 4000
    rng = substream(4, "mask")
    counts = np.zeros(T)
    for _ in range(n_draws):
        counts[sample_mask(T, 0.1, 2, rng).starts] += 1
    k = n_starts(T, 0.1)
    expect = n_draws * k / T
    sigma = np.sqrt(n_draws * (k / T) * (1 - k / T))
    assert np.all(np.abs(counts - expect) < 5 * sigma)


def test_same_stream_reproduces_bitwise():
    a = sample_mask(64, 0.065, 10, substream(7, "mask", 5))
    b = sample_mask(64, 0.065, 10, substream(7, "mask", 5))
    assert np.array_equal(a.starts, b.starts)
    assert a.mask.tobytes() == b.mask.tobytes()


@settings(max_examples=60, deadline=None)
@given(
    length=st.integers(min_value=1, max_value=100),
    p=st.floats(min_value=0.01, max_value=0.99),
    m=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_plan_invariants(length, p, m, seed):
    plan = sample_mask(length, p, m, np.random.default_rng(seed))
    assert 1 <= plan.n_masked <= length
    assert len(plan.starts) == n_starts(length, p)
    assert plan.n_masked <= len(plan.starts) * m
    assert 0 < plan.coverage <= 1.0
    assert plan.span == m


def test_saturation_and_single_frame_edges():
    rng = np.random.default_rng(3)
    # p=1 is legal: every frame is a start
    plan = sample_mask(10, 1.0, 1, rng)
    assert plan.n_masked == 10 and len(plan.starts) == 10
    assert expected_coverage(1.0, 1) == 1.0
    assert expected_coverage(0.065, 1) == pytest.approx(0.065)


def test_parameter_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_mask(10, 0.0, 3, rng)
    with pytest.raises(ValueError):
        sample_mask(10, 1.1, 3, rng)
    with pytest.raises(ValueError):
        sample_mask(10, -0.1, 3, rng)
    with pytest.raises(ValueError):
        sample_mask(10, 0.1, 0, rng)
    with pytest.raises(ValueError):
        sample_mask(0, 0.1, 3, rng)
    with pytest.raises(ValueError):
        expected_coverage(2.0, 3)


def test_plan_is_frozen():
    plan = sample_mask(10, 0.2, 2, np.random.default_rng(1))
    with pytest.raises(AttributeError):
        plan.length = 5
    assert isinstance(plan, MaskPlan)
