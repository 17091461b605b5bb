import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hxbcos.autograd import Tensor
from hxbcos.bcos import BcosConv2d
from hxbcos.hypercomplex import (
    HAMILTON_FIXED,
    LEARNABLE_ALGEBRA,
    PhWeightSpec,
    Quaternion,
    assemble_ph_weight,
    dense_param_count,
    hamilton_algebra_matrices,
    hamilton_product,
    kronecker,
    param_count,
)
from oracles import central_difference, hamilton_explicit, kron_loops, quaternion_block_matrix

quat = st.tuples(*[st.floats(-10, 10, allow_nan=False)] * 4)


# Hamilton product -------------------------------------------------------------------


def test_identity_quaternion():
    q = Quaternion(0.3, -1.0, 2.0, 0.5)
    assert hamilton_product((1, 0, 0, 0), q) == q


def test_i_times_j_is_k():
    assert hamilton_product((0, 1, 0, 0), (0, 0, 1, 0)) == (0, 0, 0, 1)


def test_j_times_i_is_minus_k():
    assert hamilton_product((0, 0, 1, 0), (0, 1, 0, 0)) == (0, 0, 0, -1)


@settings(max_examples=200, deadline=None)
@given(quat, quat)
def test_hamilton_matches_explicit_formula(p, q):
    np.testing.assert_allclose(hamilton_product(p, q), hamilton_explicit(p, q), rtol=1e-12, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(quat, quat, quat)
def test_hamilton_is_associative(p, q, r):
    left = hamilton_product(hamilton_product(p, q), r)
    right = hamilton_product(p, hamilton_product(q, r))
    np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-6)


# algebra matrices ------------------------------------------------------------------------


def test_first_matrix_is_identity():
    np.testing.assert_array_equal(hamilton_algebra_matrices()[0], np.eye(4))


def test_second_matrix_first_row():
    np.testing.assert_array_equal(hamilton_algebra_matrices()[1][0], [0, -1, 0, 0])


def test_matrices_are_signed_permutations():
    for a in hamilton_algebra_matrices():
        assert np.array_equal(np.abs(a).sum(axis=0), np.ones(4))
        assert np.array_equal(np.abs(a).sum(axis=1), np.ones(4))


def test_algebra_acts_as_left_multiplication():
    rng = np.random.default_rng(0)
    a = hamilton_algebra_matrices().astype(np.float64)
    for _ in range(50):
        w, x = rng.normal(size=4), rng.normal(size=4)
        m = sum(a[i] * w[i] for i in range(4))
        np.testing.assert_allclose(m @ x, hamilton_explicit(w, x), atol=1e-12)


# Kronecker ---------------------------------------------------------------------------------


def test_identity_algebra_gives_block_diagonal():
    f = np.arange(6.0).reshape(2, 3)
    out = kronecker(Tensor(np.eye(2)), Tensor(f)).data
    np.testing.assert_array_equal(out, np.block([[f, np.zeros((2, 3))], [np.zeros((2, 3)), f]]))


def test_rotation_sign_pattern():
    out = kronecker(Tensor(np.array([[0.0, -1.0], [1.0, 0.0]])), Tensor(np.array([[2.5]]))).data
    np.testing.assert_array_equal(out, [[0, -2.5], [2.5, 0]])


def test_kronecker_matches_loops():
    rng = np.random.default_rng(1)
    a, f = rng.normal(size=(2, 2)), rng.normal(size=(3, 3))
    np.testing.assert_array_equal(kronecker(Tensor(a), Tensor(f)).data, kron_loops(a, f))
    np.testing.assert_allclose(kron_loops(a, f), np.kron(a, f))


def test_kronecker_carries_trailing_axes():
    rng = np.random.default_rng(2)
    a, f = rng.normal(size=(3, 2)), rng.normal(size=(2, 4, 3, 3))
    np.testing.assert_array_equal(kronecker(Tensor(a), Tensor(f)).data, kron_loops(a, f))


def test_kronecker_gradients():
    rng = np.random.default_rng(3)
    a0, f0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 2, 3))
    probe = rng.normal(size=(4, 6, 3))
    a, f = Tensor(a0, requires_grad=True), Tensor(f0, requires_grad=True)
    (kronecker(a, f) * Tensor(probe)).sum().backward()
    num_a = central_difference(lambda v: float((kron_loops(v, f0) * probe).sum()), a0)
    num_f = central_difference(lambda v: float((kron_loops(a0, v) * probe).sum()), f0)
    np.testing.assert_allclose(a.grad, num_a, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(f.grad, num_f, rtol=1e-6, atol=1e-8)


# assembly ------------------------------------------------------------------------------


def test_degenerate_domain_returns_filters():
    f = np.random.default_rng(4).normal(size=(1, 3, 2, 3, 3)).astype(np.float32)
    spec = PhWeightSpec(1, 3, 2, (3, 3), algebra=np.ones((1, 1, 1)), filters=f)
    np.testing.assert_array_equal(assemble_ph_weight(spec).data, f[0])


def test_hamilton_assembly_is_the_quaternion_block_matrix():
    w = np.array([0.7, -1.3, 2.1, 0.4], dtype=np.float32)
    spec = PhWeightSpec(4, 4, 4, (1, 1), mode=HAMILTON_FIXED, filters=w.reshape(4, 1, 1, 1, 1))
    got = assemble_ph_weight(spec).data[:, :, 0, 0]
    blocks = [np.array([[v]]) for v in w]
    np.testing.assert_array_equal(got, quaternion_block_matrix(*blocks))


def test_hamilton_assembly_blocks_with_wide_filters():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(4, 3, 2, 1, 1)).astype(np.float32)
    spec = PhWeightSpec(4, 12, 8, (1, 1), mode=HAMILTON_FIXED, filters=f)
    got = assemble_ph_weight(spec).data[:, :, 0, 0]
    np.testing.assert_array_equal(got, quaternion_block_matrix(*(f[i, :, :, 0, 0] for i in range(4))))


def test_n3_assembly_matches_kronecker_oracle():
    rng = np.random.default_rng(6)
    spec = PhWeightSpec(3, 6, 9, (1, 1), rng=rng)
    a, f = spec.algebra.data.astype(np.float64), spec.filters.data.astype(np.float64)
    want = sum(kron_loops(a[i], f[i]) for i in range(3))
    np.testing.assert_allclose(assemble_ph_weight(spec).data, want, rtol=1e-6, atol=1e-7)


def test_algebra_perturbation_is_linear():
    rng = np.random.default_rng(7)
    spec = PhWeightSpec(2, 4, 2, (3, 3), rng=rng)
    base = assemble_ph_weight(spec).data.astype(np.float64)
    delta = 0.25
    spec.algebra.data = spec.algebra.data.copy()
    spec.algebra.data[1, 0, 1] += delta
    moved = assemble_ph_weight(spec).data.astype(np.float64)
    expect = np.zeros((2, 2))
    expect[0, 1] = delta
    np.testing.assert_allclose(moved - base, kron_loops(expect, spec.filters.data[1]), atol=1e-6)


def test_assembly_gradient_reaches_algebra_and_filters():
    spec = PhWeightSpec(3, 3, 3, (3, 3), rng=0)
    assemble_ph_weight(spec).sum().backward()
    assert spec.algebra.grad is not None and spec.filters.grad is not None


def test_fixed_algebra_is_not_learnable():
    spec = PhWeightSpec(4, 4, 8, (3, 3), mode=HAMILTON_FIXED, rng=0)
    assert "algebra" not in spec.parameters()
    assert not spec.algebra.requires_grad


def test_indivisible_channels_rejected():
    with pytest.raises(ValueError, match="divisible"):
        PhWeightSpec(3, 4, 6, (3, 3))


def test_hamilton_requires_n4():
    with pytest.raises(ValueError, match="n == 4"):
        PhWeightSpec(2, 4, 4, (1, 1), mode=HAMILTON_FIXED)


def test_initialization_statistics():
    spec = PhWeightSpec(4, 64, 64, (3, 3), rng=0)
    assert abs(spec.filters.data.std() - np.sqrt(2 / (64 * 9))) < 0.005
    assert abs(spec.algebra.data.std() - 0.25) < 0.05


def test_n5_is_supported():
    spec = PhWeightSpec(5, 10, 5, (3, 3), rng=0)
    assert assemble_ph_weight(spec).shape == (10, 5, 3, 3)


# counting ------------------------------------------------------------------------------


def test_count_dense_vs_ph4():
    assert dense_param_count(64, 64, 3, 3) == 36864
    spec = PhWeightSpec(4, 64, 64, (3, 3), mode=LEARNABLE_ALGEBRA, rng=0)
    assert param_count(spec) == {"filters": 9216, "algebra": 64, "total": 9280}
    assert dense_param_count(64, 64, 3, 3) / param_count(spec)["filters"] == 4


def test_n1_count_matches_dense_plus_one():
    spec = PhWeightSpec(1, 8, 6, (3, 3), rng=0)
    assert param_count(spec)["total"] == dense_param_count(8, 6, 3, 3) + 1


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6])
def test_filter_count_is_dense_over_n(n):
    layer = BcosConv2d(12, 24, 3, variant="ph", n=n, maxout_units=2, rng=0)
    assert layer.param_breakdown()["filters"] * n == layer.dense_equivalent_count()
    assert layer.param_breakdown()["algebra"] == n ** 3


def test_param_count_rejects_unknown_objects():
    with pytest.raises(TypeError):
        param_count(object())
