"""Gradient and semantics checks for the tape engine.

Every op's analytic backward is validated against central finite
differences on randomized shapes; the checks are seed-parametrized so
failures reproduce exactly.
"""

import numpy as np
import pytest

from duotag import autodiff as ad


def _loss_through(op_fn, param_arrays):
    """Scalar check loss sum(C * out) + sum(out^2) with a fixed random C.

    The linear term keeps the loss sensitive to directions a pure square
    would miss (e.g. row normalization makes sum(out^2) constant).
    """
    def build(params):
        tape = ad.Tape()
        nodes = [tape.parameter(params[name], name) for name in sorted(params)]
        out = op_fn(tape, *[nodes[i] for i in range(len(nodes))])
        weights = tape.constant(np.random.default_rng(12345).normal(size=out.shape))
        return ad.add(ad.sum_all(ad.multiply(out, weights)),
                      ad.sum_all(ad.multiply(out, out)))
    return ad.finite_difference_check(build, param_arrays)


class TestForwardExamples:
    def test_matmul_identity(self):
        tape = ad.Tape()
        eye = tape.constant(np.eye(2))
        m = tape.constant([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(eye, m).value,
                                      [[1.0, 2.0], [3.0, 4.0]])

    def test_matmul_hand_arithmetic(self):
        tape = ad.Tape()
        a = tape.constant([[1.0, 2.0], [3.0, 4.0]])
        b = tape.constant([[1.0], [1.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).value, [[3.0], [7.0]])

    def test_matmul_shape_mismatch(self):
        tape = ad.Tape()
        a = tape.constant(np.zeros((2, 3)))
        b = tape.constant(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="shape mismatch"):
            ad.matmul(a, b)

    def test_row_normalize_345_triangle(self):
        tape = ad.Tape()
        node = ad.row_l2_normalize(tape.constant([[3.0, 4.0]]))
        np.testing.assert_allclose(node.value, [[0.6, 0.8]], atol=1e-15)

    def test_row_normalize_unit_row_unchanged(self):
        tape = ad.Tape()
        row = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(ad.row_l2_normalize(tape.constant(row)).value,
                                   row, atol=1e-15)

    def test_row_normalize_degenerate_row(self):
        tape = ad.Tape()
        with pytest.raises(ValueError, match="cannot normalize row"):
            ad.row_l2_normalize(tape.constant([[1e-14, 0.0]]))

    def test_affine_zero_weights_returns_bias(self):
        tape = ad.Tape()
        x = tape.constant(np.ones((3, 2)))
        w = tape.constant(np.zeros((2, 4)))
        b = tape.constant([[1.0, 2.0, 3.0, 4.0]])
        out = ad.affine(x, w, b)
        np.testing.assert_array_equal(out.value, np.tile([1.0, 2.0, 3.0, 4.0], (3, 1)))

    def test_affine_identity(self):
        tape = ad.Tape()
        x = tape.constant([[1.0, -2.0], [0.5, 3.0]])
        out = ad.affine(x, tape.constant(np.eye(2)), tape.constant(np.zeros((1, 2))))
        np.testing.assert_array_equal(out.value, x.value)

    def test_tanh_zero_and_saturation(self):
        tape = ad.Tape()
        out = ad.tanh_act(tape.constant([[0.0, 50.0]]))
        assert out.value[0, 0] == 0.0
        assert abs(out.value[0, 1] - 1.0) < 1e-12

    def test_tanh_saturated_gradient_vanishes(self):
        tape = ad.Tape()
        x = tape.parameter([[50.0]], "x")
        loss = ad.sum_all(ad.tanh_act(x))
        grads = tape.backward(loss)
        assert abs(grads["x"][0, 0]) < 1e-12

    def test_gather_repeated_index_accumulates(self):
        tape = ad.Tape()
        table = tape.parameter(np.arange(6.0).reshape(3, 2), "t")
        out = ad.gather_rows(table, [0, 0])
        np.testing.assert_array_equal(out.value, [[0.0, 1.0], [0.0, 1.0]])
        loss = ad.sum_all(out)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads["t"], [[2.0, 2.0], [0.0, 0.0], [0.0, 0.0]])

    def test_gather_all_rows_is_identity(self):
        tape = ad.Tape()
        table = tape.constant(np.arange(6.0).reshape(3, 2))
        out = ad.gather_rows(table, [0, 1, 2])
        np.testing.assert_array_equal(out.value, table.value)

    def test_gather_out_of_range(self):
        tape = ad.Tape()
        table = tape.constant(np.zeros((3, 2)))
        with pytest.raises(IndexError):
            ad.gather_rows(table, [0, 3])

    def test_mean_pool_single_segment_of_identical_rows(self):
        tape = ad.Tape()
        x = tape.constant(np.tile([2.0, -1.0], (4, 1)))
        out = ad.mean_pool_rows(x, [4])
        np.testing.assert_allclose(out.value, [[2.0, -1.0]], atol=1e-15)

    def test_mean_pool_pairs(self):
        tape = ad.Tape()
        x = tape.constant([[1.0, 0.0], [3.0, 2.0]])
        out = ad.mean_pool_rows(x, [2])
        np.testing.assert_allclose(out.value, [[2.0, 1.0]], atol=1e-15)

    def test_mean_pool_empty_segment(self):
        tape = ad.Tape()
        x = tape.constant(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="at least one row"):
            ad.mean_pool_rows(x, [2, 0])

    def test_scale_by_exp_zero_is_identity(self):
        tape = ad.Tape()
        x = tape.constant([[1.5, -2.0]])
        out = ad.scale_by_exp(x, tape.constant([[0.0]]))
        np.testing.assert_array_equal(out.value, x.value)

    def test_scale_by_exp_ln2_doubles(self):
        tape = ad.Tape()
        x = tape.constant([[1.0, -3.0]])
        out = ad.scale_by_exp(x, tape.constant([[np.log(2.0)]]))
        np.testing.assert_allclose(out.value, [[2.0, -6.0]], rtol=1e-15)


class TestBackwardBasics:
    def test_sum_of_parameter_grad_all_ones(self):
        tape = ad.Tape()
        w = tape.parameter(np.zeros((3, 4)), "w")
        grads = tape.backward(ad.sum_all(w))
        np.testing.assert_array_equal(grads["w"], np.ones((3, 4)))

    def test_unused_parameter_grad_all_zeros(self):
        tape = ad.Tape()
        used = tape.parameter(np.ones((2, 2)), "used")
        unused = tape.parameter(np.ones((3, 3)), "unused")
        grads = tape.backward(ad.sum_all(used))
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 3)))

    def test_backward_requires_scalar_loss(self):
        tape = ad.Tape()
        w = tape.parameter(np.ones((2, 2)), "w")
        with pytest.raises(ValueError, match="1x1"):
            tape.backward(w)

    def test_backward_rejects_foreign_node(self):
        tape = ad.Tape()
        other = ad.Tape()
        loss = ad.sum_all(other.parameter(np.ones((1, 1)), "w"))
        with pytest.raises(ValueError, match="belong"):
            tape.backward(loss)

    def test_mixed_tapes_rejected(self):
        a = ad.Tape().constant(np.ones((2, 2)))
        b = ad.Tape().constant(np.ones((2, 2)))
        with pytest.raises(ValueError, match="different tapes"):
            ad.multiply(a, b)

    def test_gather_scatter_conserves_gradient_mass(self):
        rng = np.random.default_rng(42)
        tape = ad.Tape()
        table = tape.parameter(rng.normal(size=(5, 3)), "t")
        out = ad.gather_rows(table, [4, 1, 1, 0, 4, 4])
        weights = tape.constant(rng.normal(size=out.value.shape))
        loss = ad.sum_all(ad.multiply(out, weights))
        grads = tape.backward(loss)
        assert np.isclose(grads["t"].sum(), weights.value.sum())

    def test_forward_determinism_bitwise(self):
        def forward():
            rng = np.random.default_rng(7)
            tape = ad.Tape()
            a = tape.parameter(rng.normal(size=(4, 5)), "a")
            b = tape.parameter(rng.normal(size=(5, 3)), "b")
            return ad.row_l2_normalize(ad.tanh_act(ad.matmul(a, b))).value
        first, second = forward(), forward()
        assert np.array_equal(first, second)


def _random_shapes(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    k = int(rng.integers(1, 6))
    m = int(rng.integers(1, 6))
    return rng, n, k, m


@pytest.mark.parametrize("seed", range(100))
def test_every_op_matches_finite_differences(seed):
    """Property: all registered ops agree with central differences."""
    rng, n, k, m = _random_shapes(seed)

    err = _loss_through(lambda t, a, b: ad.matmul(a, b),
                        {"a": rng.normal(size=(n, k)), "b": rng.normal(size=(k, m))})
    assert err < 1e-5

    err = _loss_through(lambda t, a: ad.transpose(a),
                        {"a": rng.normal(size=(n, k))})
    assert err < 1e-5

    err = _loss_through(lambda t, a: ad.row_l2_normalize(a),
                        {"a": rng.normal(size=(n, k)) + 2.0 * np.sign(rng.normal(size=(n, k)))})
    assert err < 1e-5

    err = _loss_through(
        lambda t, b, w, x: ad.affine(x, w, b),
        {"x": rng.normal(size=(n, k)), "w": rng.normal(size=(k, m)),
         "b": rng.normal(size=(1, m))})
    assert err < 1e-5

    err = _loss_through(lambda t, a: ad.tanh_act(a), {"a": rng.normal(size=(n, k))})
    assert err < 1e-5

    indices = rng.integers(0, n, size=int(rng.integers(1, 8))).tolist()
    err = _loss_through(lambda t, a: ad.gather_rows(a, indices),
                        {"a": rng.normal(size=(n, k))})
    assert err < 1e-5

    lengths = [int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 4)))]
    err = _loss_through(lambda t, a: ad.mean_pool_rows(a, lengths),
                        {"a": rng.normal(size=(sum(lengths), k))})
    assert err < 1e-5

    err = _loss_through(lambda t, a, s: ad.scale_by_exp(a, s),
                        {"a": rng.normal(size=(n, k)), "s": rng.normal(size=(1, 1))})
    assert err < 1e-5

    err = _loss_through(lambda t, a, b: ad.add(a, b),
                        {"a": rng.normal(size=(n, k)), "b": rng.normal(size=(n, k))})
    assert err < 1e-5


class TestFiniteDifferenceCheck:
    def test_quadratic_loss_is_nearly_exact(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(size=(3, 3))

        def build(params):
            tape = ad.Tape()
            w = tape.parameter(params["w"], "w")
            return ad.sum_all(ad.multiply(w, w))

        assert ad.finite_difference_check(build, {"w": w0}) < 1e-8

    def test_non_finite_loss_raises(self):
        def build(params):
            tape = ad.Tape()
            w = tape.parameter(params["w"], "w")
            node = ad.sum_all(w)
            node.value[0, 0] = np.nan
            return node

        with pytest.raises(FloatingPointError):
            ad.finite_difference_check(build, {"w": np.ones((2, 2))})

    def test_subsampled_coordinates(self):
        rng = np.random.default_rng(5)
        w0 = rng.normal(size=(6, 6))

        def build(params):
            tape = ad.Tape()
            w = tape.parameter(params["w"], "w")
            return ad.sum_all(ad.multiply(w, w))

        err = ad.finite_difference_check(build, {"w": w0}, max_coords_per_param=5,
                                         rng=np.random.default_rng(0))
        assert err < 1e-8
