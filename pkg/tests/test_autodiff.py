import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccmd import autodiff as ad

from oracles import op_cases, op_error

H = 1e-6
TOL = 1e-5


def rng(seed=0):
    return np.random.default_rng(seed)


def test_matmul_identity():
    a = rng().normal(size=(3, 5))
    out = ad.matmul(ad.const(np.eye(3)), ad.const(a))
    np.testing.assert_array_equal(out.value, a)


def test_matmul_hand_values():
    out = ad.matmul(ad.const([[1.0, 2.0], [3.0, 4.0]]), ad.const([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.value, [[17.0], [39.0]])


def test_softmax_uniform():
    out = ad.softmax_row(ad.const([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.value, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_mask_gives_exact_zero():
    out = ad.softmax_row(ad.const([[1.0, 2.0, 3.0]]), mask=[[True, False, True]])
    assert out.value[0, 1] == 0.0
    assert out.value.sum() == pytest.approx(1.0, abs=1e-15)


def test_layer_norm_constant_row_is_zero_before_affine():
    x = ad.const(np.full((2, 4), 3.7))
    out = ad.layer_norm(x, ad.const(np.ones(4)), ad.const(np.zeros(4)))
    np.testing.assert_array_equal(out.value, 0.0)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.const(np.ones((2, 3))), ad.const(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match=r"add.*\(2, 3\).*\(2,\)"):
        ad.add(ad.const(np.ones((2, 3))), ad.const(np.ones(2)))


def test_backward_rejects_non_scalar_root():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.ShapeError, match="scalar"):
        tape.backward(ad.scale(x, 2.0))


def test_grad_of_sum_is_ones():
    tape = ad.Tape()
    x = tape.leaf(rng().normal(size=(4, 3)))
    tape.backward(ad.sum_axis(x))
    np.testing.assert_array_equal(tape.grad(x), np.ones((4, 3)))


def test_grad_of_square_sum_is_2x():
    v = rng(1).normal(size=(5,))
    tape = ad.Tape()
    x = tape.leaf(v)
    tape.backward(ad.sum_axis(ad.mul(x, x)))
    np.testing.assert_allclose(tape.grad(x), 2 * v, rtol=0, atol=0)


def test_abs_subgradient_at_zero_is_zero():
    tape = ad.Tape()
    x = tape.leaf([0.0, 2.0, -3.0])
    tape.backward(ad.sum_axis(ad.abs_(x)))
    np.testing.assert_array_equal(tape.grad(x), [0.0, 1.0, -1.0])


def test_intermediate_gradients_are_retained():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    y = ad.scale(x, 3.0)
    z = ad.sum_axis(ad.mul(y, y))
    tape.backward(z)
    np.testing.assert_allclose(tape.grad(y), 2 * y.value)
    assert y.node in tape.grads


def test_constants_are_not_recorded():
    a = ad.const(np.ones(3))
    b = ad.add(a, a)
    assert b.node is None


@given(arrays(np.float64, st.integers(1, 6), elements=st.integers(-50, 50).map(float)))
def test_grad_check_sum_is_exact(x):
    # integer inputs with a dyadic step make the central difference exact
    assert ad.grad_check(lambda t: ad.sum_axis(t), x, h=2.0 ** -10) < 1e-10


def test_grad_check_reports_nan_index():
    def f(t):
        return ad.sum_axis(ad.mul(t, ad.const([1.0, np.nan])))
    with pytest.raises(ad.GradCheckError, match=r"index \(1,\)"):
        ad.grad_check(f, np.array([1.0, 2.0]))


def test_grad_check_l1_away_from_kinks():
    r = rng(3)
    a = r.normal(size=(6,))
    b = a + np.where(r.random(6) < 0.5, -1, 1) * (0.1 + r.random(6))
    err = ad.grad_check(lambda t: ad.mean_axis(ad.abs_(t - ad.const(b))), a, H)
    assert err < TOL


def test_grad_check_softmax_first_element():
    x = rng(4).normal(size=(5,))
    err = ad.grad_check(lambda t: ad.slice_(ad.softmax_row(t), 0), x, H)
    assert err < TOL


OPS = sorted(op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_match_central_differences(op):
    worst = max(op_error(op, k) for k in range(50))
    assert worst < TOL, f"{op}: max relative error {worst:.2e}"


def test_backward_is_linear():
    r = rng(7)
    x0 = r.normal(size=(3, 4))
    w = r.normal(size=(4, 2))

    def f(t):
        return ad.sum_axis(ad.gelu(ad.matmul(t, ad.const(w))))

    def g(t):
        return ad.sum_axis(ad.mul(ad.softmax_row(t), t))

    def grad_of(fn):
        tape = ad.Tape()
        x = tape.leaf(x0)
        tape.backward(fn(x))
        return tape.grad(x)

    a, b = 1.7, -0.4
    combo = grad_of(lambda t: ad.add(ad.scale(f(t), a), ad.scale(g(t), b)))
    np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), rtol=0, atol=1e-10)


def test_rerun_is_bit_identical():
    r = rng(8)
    x0, w = r.normal(size=(2, 5, 4)), r.normal(size=(4, 4))

    def run():
        tape = ad.Tape()
        x = tape.leaf(x0)
        y = ad.layer_norm(ad.matmul(x, ad.const(w)), ad.const(np.ones(4)), ad.const(np.zeros(4)))
        out = ad.sum_axis(ad.softmax_row(y))
        out = ad.add(out, ad.sum_axis(ad.gelu(y)))
        tape.backward(out)
        return out.value, tape.grad(x)

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes()
    assert g1.tobytes() == g2.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_finite_on_finite_inputs(seed):
    r = np.random.default_rng(seed)
    x = ad.const(r.normal(scale=10, size=(3, 4)))
    for out in (ad.gelu(x), ad.softmax_row(x), ad.relu(x),
                ad.layer_norm(x, ad.const(np.ones(4)), ad.const(np.zeros(4)))):
        assert np.isfinite(out.value).all()
