import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otfuse.linalg import Rng, ShapeError
from otfuse.ot import (
    CostMatrix,
    OTError,
    SinkhornConvergenceWarning,
    build_cost_matrix,
    solve_emd,
    solve_sinkhorn,
    to_alignment_map,
)


def brute_force_min(c: np.ndarray) -> float:
    n = c.shape[0]
    return min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def plain_sinkhorn(c: np.ndarray, lam: float, iters: int = 20_000) -> np.ndarray:
    """Textbook Sinkhorn-Knopp scaling on K = exp(-C/lam); fine for moderate lam."""
    n, m = c.shape
    a, b = np.full(n, 1 / n), np.full(m, 1 / m)
    k = np.exp(-c / lam)
    v = np.ones(m)
    for _ in range(iters):
        u = a / (k @ v)
        v = b / (k.T @ u)
    return u[:, None] * k * v[None, :]


def marginal_violation(plan) -> float:
    t = plan.t
    return max(np.abs(t.sum(1) - plan.a).max(), np.abs(t.sum(0) - plan.b).max())


# -- cost matrices ---------------------------------------------------------

def test_cost_matrix_example_column():
    cm = build_cost_matrix(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(cm.c, [[0.0], [2.0]])
    assert not cm.normalized


def test_cost_matrix_self_normalized():
    x = Rng(0).normal(20).reshape(5, 4)
    cm = build_cost_matrix(x, x, normalize_cost=True)
    assert (np.diag(cm.c) == 0).all()
    assert cm.c.max() == pytest.approx(1.0, abs=1e-6)
    assert cm.c.min() >= 0 and cm.normalized


def test_cost_matrix_zero_features_stay_zero():
    z = np.zeros((3, 4))
    cm = build_cost_matrix(z, z, normalize_features=True, normalize_cost=True)
    assert not cm.c.any()
    assert not cm.normalized


def test_cost_matrix_unit_rows():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    y = np.array([[0.0, 2.0]])
    cm = build_cost_matrix(x, y, normalize_features=True)
    # (0.6, 0.8) vs (0, 1) -> 0.36 + 0.04; zero row stays zero -> 1
    np.testing.assert_allclose(cm.c, [[0.4], [1.0]])


def test_cost_matrix_errors():
    with pytest.raises(ShapeError):
        build_cost_matrix(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(OTError, match="NaN"):
        build_cost_matrix(np.array([[np.nan]]), np.ones((1, 1)))


# -- exact solver ----------------------------------------------------------

def test_emd_small_examples():
    p = solve_emd(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(p.t, 0.5 * np.eye(2))
    assert p.cost == 0.0
    q = solve_emd(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(q.t, 0.5 * np.eye(2)[::-1])
    assert q.cost == 0.0


def test_emd_integer_5x5_matches_all_permutations():
    rng = Rng(5)
    c = rng.integers(0, 20, 25).reshape(5, 5).astype(float)
    assert solve_emd(c).cost == brute_force_min(c)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(0, 10, allow_nan=False))))
def test_emd_objective_is_brute_force_minimum(c):
    plan = solve_emd(c)
    assert abs(plan.cost - brute_force_min(c)) <= 1e-9
    n = c.shape[0]
    # a scaled permutation with exact uniform marginals
    assert set(np.unique(plan.t)) <= {0.0, 1.0 / n}
    assert marginal_violation(plan) <= 1e-15


def test_emd_rejects_rectangular():
    with pytest.raises(OTError, match="Sinkhorn"):
        solve_emd(np.ones((3, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 32))
def test_emd_on_permuted_features_returns_the_inverse(n, seed):
    rng = Rng(seed)
    y = rng.normal(n * 3).reshape(n, 3)
    perm = rng.permutation(n)
    x = y[perm]  # other neuron i is anchor neuron perm[i]
    m = to_alignment_map(solve_emd(build_cost_matrix(x, y)))
    expected = np.zeros((n, n))
    expected[np.arange(n), perm] = 1.0
    np.testing.assert_array_equal(m, expected)
    np.testing.assert_array_equal(m.T @ x, y)


# -- Sinkhorn --------------------------------------------------------------

def test_sinkhorn_huge_lambda_is_uniform():
    c = Rng(2).uniform(35).reshape(5, 7)
    p = solve_sinkhorn(c, 1e6)
    assert np.abs(p.t - 1 / 35).max() < 1e-4
    assert p.converged and marginal_violation(p) < 1e-9


def test_sinkhorn_tiny_lambda_on_swap_cost_is_emd():
    c = np.array([[0.0, 1.0], [1.0, 0.0]])
    p = solve_sinkhorn(c, 1e-3)
    assert np.abs(p.t - 0.5 * np.eye(2)).max() < 1e-4


@pytest.mark.parametrize("lam", [0.2, 0.5, 1.0])
@pytest.mark.parametrize("shape", [(4, 4), (5, 3), (3, 6)])
def test_sinkhorn_matches_textbook_scaling(lam, shape):
    c = Rng(11).uniform(shape[0] * shape[1]).reshape(shape)
    p = solve_sinkhorn(c, lam)
    np.testing.assert_allclose(p.t, plain_sinkhorn(c, lam), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([1e-2, 0.05, 0.3, 2.0]),
       st.integers(0, 2 ** 32))
def test_sinkhorn_marginals_and_mass(n, m, lam, seed):
    c = Rng(seed).uniform(n * m).reshape(n, m)
    p = solve_sinkhorn(c, lam)
    assert p.converged
    assert marginal_violation(p) < 1e-9
    assert (p.t >= 0).all()
    assert abs(p.t.sum() - 1) < 1e-6
    assert p.violation == pytest.approx(marginal_violation(p), abs=1e-12)


def test_sinkhorn_objective_monotone_in_lambda():
    c = Rng(8).uniform(64).reshape(8, 8)
    costs = [solve_sinkhorn(c, lam).cost for lam in (1, 0.5, 0.1, 0.05, 0.01)]
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    assert costs[-1] >= solve_emd(c).cost - 1e-12


def test_sinkhorn_deterministic():
    c = Rng(4).uniform(30).reshape(5, 6)
    a, b = solve_sinkhorn(c, 0.01), solve_sinkhorn(c, 0.01)
    assert a.t.tobytes() == b.t.tobytes() and a.iterations == b.iterations


def test_sinkhorn_rejects_nonpositive_lambda():
    for lam in (0.0, -1.0):
        with pytest.raises(OTError):
            solve_sinkhorn(np.ones((2, 2)), lam)


def test_sinkhorn_reports_non_convergence():
    c = Rng(1).uniform(100).reshape(10, 10)
    with pytest.warns(SinkhornConvergenceWarning):
        p = solve_sinkhorn(c, 1e-3, max_iter=3)
    assert not p.converged
    assert p.iterations == 3
    assert p.violation > 1e-9


def test_sinkhorn_accepts_cost_matrix_object():
    c = np.array([[0.0, 1.0], [1.0, 0.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = solve_sinkhorn(CostMatrix(c), 0.1)
    np.testing.assert_array_equal(a.t, solve_sinkhorn(c, 0.1).t)


# -- alignment maps --------------------------------------------------------

def test_alignment_map_examples():
    perm = np.eye(4)[[2, 0, 3, 1]]
    np.testing.assert_array_equal(to_alignment_map(perm / 4), perm)
    np.testing.assert_allclose(to_alignment_map(np.full((3, 2), 1 / 6)), np.full((3, 2), 1 / 3))


def test_alignment_map_rectangular_columns_sum_to_one():
    p = solve_sinkhorn(Rng(3).uniform(6).reshape(3, 2), 0.1)
    m = to_alignment_map(p)
    np.testing.assert_allclose(m.sum(axis=0), 1.0, atol=1e-6)


def test_alignment_map_zero_column_rejected():
    with pytest.raises(OTError):
        to_alignment_map(np.array([[0.5, 0.0], [0.5, 0.0]]))
