import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from mhc_gnn import autodiff as ad
from mhc_gnn.analysis import diversity_bound_holds
from mhc_gnn.linalg import Rng
from mhc_gnn.sinkhorn import (
    identity_deviation,
    product_closure_check,
    sinkhorn_project,
    stochastic_deviation,
    stream_variance,
)

logits = st.sampled_from([2, 3, 4, 8]).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(-3, 3, allow_nan=False)))


@given(logits)
def test_projection_nonnegative_with_exact_columns(h):
    m = sinkhorn_project(h, T=10, tau=0.1).values
    assert np.all(m >= 0)
    assert np.allclose(m.sum(axis=0), 1.0, atol=1e-12)  # last step normalises columns


@given(logits, st.integers(1, 30))
def test_deviation_non_increasing_in_T(h, T):
    a = sinkhorn_project(h, T=T, tau=0.1).deviation
    b = sinkhorn_project(h, T=T + 1, tau=0.1).deviation
    assert b <= a + 1e-12


@given(st.sampled_from([2, 4, 8]), st.integers(0, 2**16))
def test_small_logits_converge_within_tolerance(n, seed):
    # logits at the scale the layer produces at initialisation
    h = Rng(seed).normal((n, n), 0.05)
    assert sinkhorn_project(h, T=10, tau=0.1).deviation < 1e-3


def test_two_by_two_hand_example():
    h = 0.1 * np.log(2.0) * np.eye(2)
    for T in (1, 5):
        m = sinkhorn_project(h, T=T, tau=0.1).values
        assert np.allclose(m, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-15)


def test_doubly_stochastic_input_is_fixed_point():
    m0 = np.array([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]])
    m = sinkhorn_project(0.1 * np.log(m0), T=10, tau=0.1).values
    assert np.allclose(m, m0, atol=1e-14)


def test_identity_deviation_examples():
    assert identity_deviation(np.eye(3)) == pytest.approx(0.0)
    assert identity_deviation(np.full((2, 2), 0.5)) == pytest.approx(1.0)
    assert identity_deviation(np.full((4, 4), 0.25)) == pytest.approx(np.sqrt(3))


def test_closure_examples():
    p = np.eye(4)[[1, 2, 3, 0]]
    assert product_closure_check(np.eye(4), np.eye(4)) == 0.0
    assert product_closure_check(p, p.T) == 0.0


@given(logits, st.integers(0, 2**16))
def test_mean_conservation(h, seed):
    m = sinkhorn_project(h, T=10, tau=0.1).values
    x = Rng(seed).normal((m.shape[0], 3))
    err = np.abs((m @ x).mean(axis=0) - x.mean(axis=0)).max()
    assert err <= 1e-6 * np.linalg.norm(x)


@given(logits, st.integers(0, 2**16))
def test_product_deviation_bounded_by_inputs(a, seed):
    n = a.shape[0]
    b = Rng(seed).normal((n, n))
    ma = sinkhorn_project(a, T=10, tau=0.1).values
    mb = sinkhorn_project(b, T=10, tau=0.1).values
    bound = n * (stochastic_deviation(ma) + stochastic_deviation(mb)) + 1e-12
    assert product_closure_check(ma, mb) <= bound


def _birkhoff(n, r, k=3):
    w = r.uniform(k) + 1e-3
    w /= w.sum()
    return sum(wi * np.eye(n)[r.permutation(n)] for wi in w)


@given(st.sampled_from([2, 3, 4, 8]), st.integers(0, 2**16))
def test_diversity_bound_exact_doubly_stochastic(n, seed):
    r = Rng(seed)
    # mostly identity plus a little mass on random permutations
    t = r.uniform(1, 0.0, 0.05)[0]
    m = (1 - t) * np.eye(n) + t * _birkhoff(n, r)
    eps = identity_deviation(m)
    assume(eps <= 0.1)
    x = r.normal((n, 5))
    assert stream_variance(m @ x) >= (1 - 2 * eps - 1e-6) * stream_variance(x)


@given(st.sampled_from([2, 3, 4]), st.integers(0, 2**16))
def test_diversity_bound_sinkhorn_outputs(n, seed):
    # row residual delta leaks the stream mean m: see diversity_bound_holds
    r = Rng(seed)
    m = sinkhorn_project(np.eye(n) + r.normal((n, n), 0.05), T=10, tau=0.1).values
    assume(identity_deviation(m) <= 0.1)
    x = r.normal((n, 5))
    assert diversity_bound_holds(m, x)


def test_zero_logits_give_uniform_matrix():
    m = sinkhorn_project(np.zeros((4, 4)), T=1).values
    assert np.allclose(m, 0.25)


def test_strong_diagonal_gives_identity():
    m = sinkhorn_project(10.0 * np.eye(3), T=10, tau=0.1).values
    assert np.allclose(m, np.eye(3), atol=1e-12)
    assert identity_deviation(m) < 1e-12


def test_permutation_logits_give_permutation():
    perm = np.eye(4)[[2, 0, 3, 1]]
    m = sinkhorn_project(5.0 * perm, T=10, tau=0.1).values
    assert np.allclose(m, perm, atol=1e-12)


def test_extreme_logits_are_clamped():
    h = np.array([[1e6, -1e6], [-1e6, 1e6]])
    m = sinkhorn_project(h, T=10, tau=0.1).values
    assert np.all(np.isfinite(m))
    assert np.allclose(m, np.eye(2), atol=1e-12)


def test_batch_shape_and_bad_inputs():
    out = sinkhorn_project(Rng(0).normal((5, 3, 3)))
    assert out.values.shape == (5, 3, 3)
    assert out.iterations == 10
    with pytest.raises(ValueError):
        sinkhorn_project(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        sinkhorn_project(np.zeros((2, 2)), tau=0.0)
    with pytest.raises(ValueError):
        sinkhorn_project(np.zeros((2, 2)), T=0)


def test_gradient_through_unrolled_iterations():
    h = Rng(1).normal((2, 3, 3), 0.3)
    w = Rng(2).normal((2, 3, 3))

    def f(p):
        return ad.sum(sinkhorn_project(p["h"], T=5, tau=0.5).matrices * w)

    assert ad.finite_difference_check(f, {"h": h}) < 1e-6


def test_stopgrad_blocks_gradient():
    tape = ad.Tape()
    h = tape.var(Rng(1).normal((3, 3)))
    m = sinkhorn_project(h, stopgrad=True).matrices
    g = tape.gradients(ad.sum(m * m), {"h": h})
    assert np.all(g["h"] == 0)


def test_stream_variance_examples():
    x = np.array([[[1.0, 0.0], [-1.0, 0.0]]])
    assert stream_variance(x) == pytest.approx([1.0])
    assert stream_variance(np.ones((2, 4, 3))) == pytest.approx([0.0, 0.0])
