import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tubelik.logspace import log_mean_exp, log_sum_exp, softmax

finite = st.floats(-700, 50, allow_nan=False)


def test_constant_input_is_bit_exact():
    for c in (-1234.5678, -2.302585092994046, 0.0, 3.3):
        assert log_mean_exp(np.full(7, c)) == c


def test_neg_inf_entries_count_in_denominator():
    assert log_mean_exp([-np.inf, 0.0]) == pytest.approx(math.log(0.5))
    assert log_mean_exp([-np.inf, -np.inf]) == -np.inf


def test_empty_slice_rejected():
    with pytest.raises(ValueError):
        log_mean_exp(np.zeros((3, 0)))


def test_underflow_safe():
    assert log_mean_exp([-1e4, -1e4 + math.log(3)]) == pytest.approx(-1e4 + math.log(2))


def test_weighted_mean():
    a = np.log([0.1, 0.3])
    assert log_mean_exp(a, weights=[0.25, 0.75]) == pytest.approx(math.log(0.25))


@given(st.lists(finite, min_size=1, max_size=20))
def test_matches_naive(values):
    a = np.array(values)
    top = max(values)
    naive = math.log(math.fsum(math.exp(v - top) for v in values) / len(values)) + top
    assert log_mean_exp(a) == pytest.approx(naive, rel=1e-12, abs=1e-12)
    assert log_sum_exp(a) == pytest.approx(naive + math.log(len(values)), rel=1e-12, abs=1e-12)


def test_softmax():
    w = softmax(np.array([0.0, -np.inf, math.log(3)]))
    np.testing.assert_allclose(w, [0.25, 0.0, 0.75])
