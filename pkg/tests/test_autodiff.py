import math

import numpy as np
import pytest

from sista import autodiff as ad
from sista.errors import ConfigError, NumericError, ShapeError, UsageError

from oracles import matmul as loop_matmul


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), m).value, m)


def test_matmul_hand_example():
    out = ad.matmul([[1, 2], [3, 4]], [[1], [1]])
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.array(loop_matmul(a.tolist(), b.tolist()))
    np.testing.assert_allclose(ad.matmul(a, b).value, expected, rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_row_softmax_uniform():
    np.testing.assert_allclose(ad.row_softmax([[0.0, 0.0, 0.0]], 1.0).value, [[1 / 3] * 3], atol=1e-15)


def test_row_softmax_temperature_formula():
    e = math.exp(-5.0)
    out = ad.row_softmax([[1.0, 0.0]], 0.2).value
    np.testing.assert_allclose(out, [[1 / (1 + e), e / (1 + e)]], rtol=1e-14)


def test_row_softmax_shift_invariance_and_row_sums(rng):
    m = rng.normal(size=(5, 7)) * 10
    for tau in (0.05, 0.2, 3.0):
        base = ad.row_softmax(m, tau).value
        shifted = ad.row_softmax(m + rng.normal(size=(5, 1)) * 100, tau).value
        np.testing.assert_allclose(base, shifted, atol=1e-12)
        np.testing.assert_allclose(base.sum(axis=1), 1.0, atol=1e-9)


def test_row_softmax_large_logits_stay_finite():
    out = ad.row_softmax([[1000.0, 0.0, -1000.0]], 0.01).value
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_row_softmax_rejects_non_positive_temperature(tau):
    with pytest.raises(ConfigError):
        ad.row_softmax([[1.0, 2.0]], tau)


def test_backward_square():
    tape = ad.Tape()
    x = tape.variable(3.0)
    assert tape.backward(x * x)[x][0, 0] == 6.0


def test_backward_sum_is_ones(rng):
    tape = ad.Tape()
    x = tape.variable(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(tape.backward(x.sum())[x], np.ones((3, 4)))


def test_backward_rejects_non_scalar():
    tape = ad.Tape()
    x = tape.variable(np.ones((2, 2)))
    with pytest.raises(UsageError):
        tape.backward(x * 2.0)


def test_backward_unused_input_gets_zero():
    tape = ad.Tape()
    x = tape.variable(np.ones((2, 3)))
    y = tape.variable(2.0)
    grads = tape.backward(y * y)
    np.testing.assert_array_equal(grads[x], np.zeros((2, 3)))


def test_backward_shared_subexpression():
    # q = (x + y) * (x + 1): dq/dx = 2x + y + 1, dq/dy = x + 1
    tape = ad.Tape()
    x, y = tape.variable(2.0), tape.variable(-4.0)
    grads = tape.backward((x + y) * (x + 1.0))
    assert grads[x][0, 0] == 1.0
    assert grads[y][0, 0] == 3.0


def test_backward_is_deterministic(rng):
    a = rng.normal(size=(4, 3))

    def run():
        tape = ad.Tape()
        x = tape.variable(a)
        return tape.backward(ad.row_log_softmax(ad.tanh(x @ x.T), 0.3).sum())[x]

    np.testing.assert_array_equal(run(), run())


def test_mixing_tapes_is_an_error():
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(UsageError):
        t1.variable(1.0) + t2.variable(1.0)


def test_constants_are_not_recorded():
    out = ad.tensor([[1.0, 2.0]]) * 3.0
    assert not out.tracked


def test_non_finite_values_rejected():
    with pytest.raises(NumericError):
        ad.Tensor([[np.nan]])
    with pytest.raises(NumericError):
        ad.exp([[1e6]])


def test_grad_check_quadratic_form(rng):
    q = rng.normal(size=(4, 4))
    q = q @ q.T
    err = ad.grad_check(lambda x: (x @ q @ x.T), rng.normal(size=(1, 4)))
    assert err <= 1e-9


def test_grad_check_reports_non_finite():
    with pytest.raises(NumericError):
        ad.grad_check(lambda x: ad.log(x - 10.0).sum(), np.ones((1, 2)))


def test_grad_check_catches_a_wrong_gradient():
    def bad_square(x):
        return ad.primitive(x.value ** 2, (x,), lambda g: (g * x.value,))  # missing factor 2

    assert ad.grad_check(lambda x: bad_square(x).sum(), np.ones((1, 3))) > 0.1


PRIMITIVES = {
    "tanh": lambda x: ad.tanh(x).sum(),
    "exp": lambda x: (ad.exp(x * 0.5) * x).sum(),
    "log": lambda x: ad.log(x * x + 1.0).sum(),
    "sqrt": lambda x: ad.sqrt(x * x + 0.5).sum(),
    "div": lambda x: (x / (x * x + 2.0)).sum(),
    "rdiv": lambda x: (1.0 / (x * x + 1.0)).sum(),
    "sub_bias_broadcast": lambda x: ((x - x[0:1]) * (x - x[:, 0:1])).sum(),
    "mean": lambda x: (x * x).mean(axis=1).sum(),
    "transpose_matmul": lambda x: (x @ x.T @ x).sum(),
    "take": lambda x: (x[[0, 2, 0]] * x[[1, 1, 2]]).sum(),
    "concat_rows": lambda x: (ad.concat_rows([x, x * x]) ** 1 if False else ad.concat_rows([x, x * x])).sum(),
    "normalize_rows": lambda x: (ad.normalize_rows(x) * np.arange(12.0).reshape(3, 4)).sum(),
    "row_softmax": lambda x: (ad.row_softmax(x, 0.3) * np.arange(12.0).reshape(3, 4)).sum(),
    "row_log_softmax": lambda x: (ad.row_log_softmax(x, 0.7) * np.arange(12.0).reshape(3, 4)).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    x = np.random.default_rng(7).normal(size=(3, 4))
    assert ad.grad_check(PRIMITIVES[name], x) <= 1e-7
