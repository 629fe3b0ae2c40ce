import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llprot.losses import PredictionMatrix
from llprot.oracles import (
    ORACLE_BOUND,
    _multiset_assignments,
    assignment_plan,
    comb_loss_binary,
    comb_loss_exact,
    integral_counts,
    relax_lp_loss_exact,
)


def P(*cols):
    return PredictionMatrix.from_probs(np.array(cols, dtype=float).T)


def test_comb_exact_example():
    v, t = comb_loss_exact(P((0.9, 0.1), (0.2, 0.8)), [0.5, 0.5], 1.0, "indicator")
    # mpmath: -(ln .9 + ln .8) / 2
    np.testing.assert_allclose(v, 0.16425203348601803, atol=1e-15)
    np.testing.assert_array_equal(t, [0, 1])


def test_comb_exact_uniform_ties_pick_lexicographic():
    K, n = 3, 3
    F = PredictionMatrix.from_probs(np.full((K, n), 1 / K))
    v, t = comb_loss_exact(F, [1 / 3, 1 / 3, 1 / 3], 1.0, "indicator")
    np.testing.assert_allclose(v, math.log(3), atol=1e-15)
    np.testing.assert_array_equal(t, [0, 1, 2])


def test_comb_exact_singleton():
    F = P((0.2, 0.5, 0.3))
    v, t = comb_loss_exact(F, [0, 0, 1], 1.0, "indicator")
    np.testing.assert_allclose(v, -math.log(0.3))
    np.testing.assert_array_equal(t, [2])


def test_comb_exact_non_integral_indicator_warns():
    with pytest.warns(UserWarning):
        v, t = comb_loss_exact(P((0.5, 0.5), (0.5, 0.5)), [0.3, 0.7], 0.5, "indicator")
    assert v == math.inf and np.all(t == -1)


def test_comb_exact_bound():
    F = PredictionMatrix.from_probs(np.full((10, 8), 0.1))
    assert 10**8 > ORACLE_BOUND
    with pytest.raises(ValueError, match="oracle bound exceeded"):
        comb_loss_exact(F, np.full(10, 0.1), 1.0, "l2")


def test_comb_soft_divergence_alpha_zero_prefers_counts():
    F = P((0.99, 0.01), (0.99, 0.01))
    v, t = comb_loss_exact(F, [0.5, 0.5], 0.0, "l2")
    assert v == 0.0 and sorted(t) == [0, 1]


def test_comb_brute_force_agrees_with_python_loop(rng):
    from itertools import product
    for _ in range(20):
        K, n = int(rng.integers(2, 4)), int(rng.integers(1, 5))
        F = PredictionMatrix.from_logits(rng.standard_normal((K, n)))
        z = rng.dirichlet(np.ones(K))
        alpha = float(rng.uniform())
        best = math.inf
        for t in product(range(K), repeat=n):
            counts = np.bincount(t, minlength=K) / n
            val = -alpha / n * sum(F.log_values[c, j] for j, c in enumerate(t))
            val += (1 - alpha) * float(np.sum((counts - z) ** 2))
            best = min(best, val)
        np.testing.assert_allclose(comb_loss_exact(F, z, alpha, "l2")[0], best, atol=1e-13)


def test_binary_example():
    p1 = np.array([0.9, 0.6, 0.2])
    F = PredictionMatrix.from_probs(np.stack([1 - p1, p1]))
    v, t = comb_loss_binary(F, [1 / 3, 2 / 3], 1.0, "indicator")
    # mpmath: -(ln .9 + ln .6 + ln .8) / 3
    np.testing.assert_allclose(v, 0.27977656357934225, atol=1e-15)
    np.testing.assert_array_equal(t, [1, 1, 0])


def test_binary_singleton():
    F = P((0.3, 0.7))
    v, t = comb_loss_binary(F, [0.0, 1.0], 1.0, "indicator")
    np.testing.assert_allclose(v, -math.log(0.7))
    np.testing.assert_array_equal(t, [1])


def test_binary_rejects_multiclass():
    with pytest.raises(ValueError):
        comb_loss_binary(P((0.2, 0.3, 0.5)), [0, 0, 1], 1.0, "l2")


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 12), st.sampled_from([0.0, 0.3, 0.7, 1.0]),
       st.sampled_from(["indicator", "l1", "l2", "kl"]), st.integers(0, 2**32 - 1))
def test_binary_equals_enumeration(n, alpha, d, seed):
    rng = np.random.default_rng(seed)
    F = PredictionMatrix.from_logits(2 * rng.standard_normal((2, n)))
    k = int(rng.integers(0, n + 1))
    z = np.array([n - k, k]) / n if d == "indicator" else rng.dirichlet([1, 1])
    a = comb_loss_binary(F, z, alpha, d)[0]
    b = comb_loss_exact(F, z, alpha, d)[0]
    assert a == b or abs(a - b) < 1e-12


def test_relax_lp_example():
    # class-0 probabilities (0.9, 0.6, 0.2): feasible values 0.414932, 1.012185, 1.609438
    p0 = np.array([0.9, 0.6, 0.2])
    F = PredictionMatrix.from_probs(np.stack([p0, 1 - p0]))
    v, U = relax_lp_loss_exact(F, [1 / 3, 2 / 3])
    np.testing.assert_allclose(v, 0.41493159961539704, atol=1e-15)
    np.testing.assert_array_equal(U.values, [[1, 0, 0], [0, 1, 1]])


def test_relax_lp_same_input_as_binary_example():
    p1 = np.array([0.9, 0.6, 0.2])
    F = PredictionMatrix.from_probs(np.stack([1 - p1, p1]))
    v, U = relax_lp_loss_exact(F, [1 / 3, 2 / 3])
    np.testing.assert_allclose(v, 0.27977656357934225, atol=1e-15)
    np.testing.assert_array_equal(U.values.argmax(axis=0), [1, 1, 0])


def test_relax_lp_uniform_and_singleton():
    F = PredictionMatrix.from_probs(np.full((3, 3), 1 / 3))
    np.testing.assert_allclose(relax_lp_loss_exact(F, [2 / 3, 1 / 3, 0])[0], math.log(3), atol=1e-15)
    F1 = P((0.1, 0.7, 0.2))
    v, U = relax_lp_loss_exact(F1, [0, 1, 0])
    np.testing.assert_allclose(v, -math.log(0.7))
    np.testing.assert_array_equal(U.values[:, 0], [0, 1, 0])


def test_relax_lp_errors():
    with pytest.raises(ValueError, match="infeasible marginals"):
        relax_lp_loss_exact(P((0.5, 0.5), (0.5, 0.5)), [0.3, 0.7])
    F = PredictionMatrix.from_probs(np.full((2, 30), 0.5))
    with pytest.raises(ValueError, match="oracle bound exceeded"):
        relax_lp_loss_exact(F, [0.5, 0.5])


def test_tightness(rng):
    for _ in range(40):
        K, n = int(rng.integers(2, 4)), int(rng.integers(1, 7))
        F = PredictionMatrix.from_logits(rng.standard_normal((K, n)))
        z = np.bincount(rng.integers(0, K, n), minlength=K) / n
        v, U = relax_lp_loss_exact(F, z)
        assert set(np.unique(U.values)) <= {0.0, 1.0}
        assert abs(v - comb_loss_exact(F, z, 1.0, "indicator")[0]) < 1e-12


def test_helpers():
    assert list(_multiset_assignments([1, 2])) == [(0, 1, 1), (1, 0, 1), (1, 1, 0)]
    np.testing.assert_array_equal(integral_counts([0.25, 0.75], 4), [1, 3])
    assert integral_counts([0.3, 0.7], 4) is None
    np.testing.assert_array_equal(assignment_plan([1, 0], 2), [[0, 1], [1, 0]])
