import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msnet import numkit
from msnet.errors import ConfigError, DimensionError, NumericError, ValidationError
from msnet.numkit import AdamState, BatchNormState, Parameter


def test_as_tensor_rejects_nonfinite():
    with pytest.raises(NumericError):
        numkit.as_tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        numkit.as_tensor([np.inf])


def test_parameter_shape_invariant():
    with pytest.raises(DimensionError):
        Parameter(np.zeros(3), np.zeros(4))


# --- affine -----------------------------------------------------------------


def test_affine_identity():
    out, _ = numkit.affine(
        np.array([[1.0, 2.0]]), Parameter.of(np.eye(2)), Parameter.of([0.0, 0.0])
    )
    assert np.array_equal(out, [[1.0, 2.0]])


def test_affine_hand_value():
    out, _ = numkit.affine(
        np.array([[1.0, 1.0]]),
        Parameter.of([[2.0, 3.0], [4.0, 5.0]]),
        Parameter.of([1.0, 1.0]),
    )
    assert np.array_equal(out, [[7.0, 9.0]])


def test_affine_backward_sum_loss():
    w = Parameter.of([[2.0, 3.0], [4.0, 5.0]])
    b = Parameter.of([1.0, 1.0])
    x = np.array([[1.0, 1.0]])
    out, cache = numkit.affine(x, w, b)
    d_x = numkit.affine_backward(cache, np.ones_like(out))
    assert np.array_equal(w.grad, [[1.0, 1.0], [1.0, 1.0]])
    assert np.array_equal(b.grad, [1.0, 1.0])
    assert np.array_equal(d_x, [[5.0, 9.0]])  # row sums of W


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        numkit.affine(np.zeros((1, 3)), Parameter.of(np.eye(2)), Parameter.of([0.0, 0.0]))


def test_affine_gradcheck():
    rng = numkit.make_rng(0, 1)
    w = Parameter.of(rng.standard_normal((3, 2)))
    b = Parameter.of(rng.standard_normal(2))
    x = rng.standard_normal((4, 3))

    def loss_fn():
        w.zero_grad()
        b.zero_grad()
        out, cache = numkit.affine(x, w, b)
        numkit.affine_backward(cache, np.ones_like(out))
        return float(out.sum())

    assert numkit.grad_check(loss_fn, [w, b], eps=1e-6) < 1e-6


# --- tanh -------------------------------------------------------------------


def test_tanh_values():
    out, _ = numkit.tanh_op(np.array([0.0]))
    assert out[0] == 0.0
    out, cache = numkit.tanh_op(np.array([20.0]))
    assert 0.999 < out[0] <= 1.0 and np.isfinite(out[0])  # saturates, never overflows
    assert numkit.tanh_backward(cache, np.ones(1))[0] == pytest.approx(0.0, abs=1e-12)
    out15, _ = numkit.tanh_op(np.array([15.0]))
    assert out15[0] < 1.0


def test_tanh_derived_point():
    out, cache = numkit.tanh_op(np.array([0.5]))
    assert out[0] == pytest.approx(0.46211715726000974, abs=1e-12)
    grad = numkit.tanh_backward(cache, np.ones(1))
    assert grad[0] == pytest.approx(0.7864477329659274, abs=1e-12)


# --- softmax ----------------------------------------------------------------


def test_softmax_uniform_and_shift():
    assert np.allclose(numkit.softmax(np.zeros(3)), 1.0 / 3.0)
    big = numkit.softmax(np.array([1000.0, 1000.0, 1000.0]))
    assert np.all(np.isfinite(big))
    assert np.allclose(big, 1.0 / 3.0)


def test_softmax_derived_point():
    p = numkit.softmax(np.array([1.0, 0.0, 0.0]))
    assert p[0] == pytest.approx(0.5761168847658291, abs=1e-12)
    assert p[1] == pytest.approx(0.21194155761708544, abs=1e-12)
    assert p[2] == pytest.approx(0.21194155761708544, abs=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        numkit.softmax(np.array([1.0, np.nan]))


@given(
    st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8),
    st.floats(min_value=-50, max_value=50),
)
@settings(max_examples=200)
def test_softmax_properties(scores, shift):
    scores = np.array(scores)
    p = numkit.softmax(scores)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    shifted = numkit.softmax(scores + shift)
    assert np.max(np.abs(shifted - p)) <= 1e-12


# --- softmax cross-entropy --------------------------------------------------


def test_xent_uniform_scores():
    loss, _ = numkit.softmax_xent(np.zeros((1, 3)), [0])
    assert loss == pytest.approx(math.log(3.0), abs=1e-12)


def test_xent_confident_prediction():
    loss, _ = numkit.softmax_xent(np.array([[50.0, 0.0, 0.0]]), [0])
    assert loss < 1e-12


def test_xent_label_validation():
    with pytest.raises(ValidationError):
        numkit.softmax_xent(np.zeros((1, 3)), [3])
    with pytest.raises(ValidationError):
        numkit.softmax_xent(np.zeros((1, 3)), [-1])


def test_xent_grad_matches_finite_differences():
    rng = numkit.make_rng(3, 1)
    scores = Parameter.of(rng.standard_normal((4, 3)))
    labels = np.array([0, 2, 1, 1])

    def loss_fn():
        scores.zero_grad()
        loss, grad = numkit.softmax_xent(scores.value, labels)
        scores.grad += grad
        return loss

    assert numkit.grad_check(loss_fn, [scores], eps=1e-6) < 1e-6


# --- dropout ----------------------------------------------------------------


def test_dropout_identity_cases():
    x = np.ones((3, 3))
    out, mask = numkit.dropout(x, 0.0, None, training=True)
    assert mask is None and np.array_equal(out, x)
    out, mask = numkit.dropout(x, 0.5, None, training=False)
    assert mask is None and np.array_equal(out, x)


def test_dropout_rate_validation():
    with pytest.raises(ConfigError):
        numkit.dropout(np.ones(2), 1.0, numkit.make_rng(0, 2), training=True)


def test_dropout_mean_preserved():
    rng = numkit.make_rng(7, 2)
    x = np.ones(100_000)
    out, _ = numkit.dropout(x, 0.6, rng, training=True)
    # se of the mean = sqrt(rate/(1-rate))/sqrt(n) ~= 0.00387; 0.02 is > 5 sigma
    assert abs(out.mean() - 1.0) < 0.02


def test_dropout_expectation_3sigma():
    rng = numkit.make_rng(11, 2)
    rate = 0.3
    n = 100_000
    out, _ = numkit.dropout(np.full(n, 2.0), rate, rng, training=True)
    sigma = 2.0 * math.sqrt(rate / (1.0 - rate)) / math.sqrt(n)
    assert abs(out.mean() - 2.0) <= 3.0 * sigma


def test_dropout_deterministic_given_seed():
    a, mask_a = numkit.dropout(np.ones(64), 0.4, numkit.make_rng(5, 2), training=True)
    b, mask_b = numkit.dropout(np.ones(64), 0.4, numkit.make_rng(5, 2), training=True)
    assert np.array_equal(a, b)
    assert np.array_equal(mask_a, mask_b)


def test_dropout_backward_uses_mask():
    rng = numkit.make_rng(6, 2)
    x = np.ones((2, 4))
    _, mask = numkit.dropout(x, 0.5, rng, training=True)
    d = numkit.dropout_backward(mask, np.ones_like(x))
    assert np.array_equal(d, mask)


# --- batchnorm ---------------------------------------------------------------


def test_batchnorm_near_identity_on_standardized_input():
    # tiny eps so the eps term stays below the stated tolerance
    state = BatchNormState.create(2, eps=1e-12)
    x = np.array([[-1.0, 1.0], [1.0, -1.0]])  # zero mean, unit variance columns
    out, _ = numkit.batchnorm(x, state, training=True)
    assert np.max(np.abs(out - x)) < 1e-6


def test_batchnorm_constant_column_gives_beta():
    state = BatchNormState.create(1)
    state.beta.value[...] = 3.25
    out, _ = numkit.batchnorm(np.full((4, 1), 7.0), state, training=True)
    assert np.allclose(out, 3.25)


def test_batchnorm_batch_of_one_rejected():
    state = BatchNormState.create(2)
    with pytest.raises(ValidationError):
        numkit.batchnorm(np.ones((1, 2)), state, training=True)


def test_batchnorm_eval_uses_running_stats():
    state = BatchNormState.create(1)
    state.running_mean[...] = 2.0
    state.running_var[...] = 4.0
    out, _ = numkit.batchnorm(np.array([[4.0]]), state, training=False)
    assert out[0, 0] == pytest.approx(1.0, abs=1e-5)


def test_batchnorm_running_stats_update():
    state = BatchNormState.create(1, momentum=0.5)
    x = np.array([[0.0], [2.0]])  # mean 1, biased var 1, unbiased var 2
    numkit.batchnorm(x, state, training=True)
    assert state.running_mean[0] == pytest.approx(0.5)
    assert state.running_var[0] == pytest.approx(0.5 * 1.0 + 0.5 * 2.0)


def test_batchnorm_gradcheck():
    rng = numkit.make_rng(9, 3)
    state = BatchNormState.create(3)
    state.gamma.value[...] = rng.uniform(0.5, 1.5, 3)
    state.beta.value[...] = rng.standard_normal(3)
    x = Parameter.of(rng.standard_normal((5, 3)))
    coef = rng.standard_normal((5, 3))

    def loss_fn():
        for p in (state.gamma, state.beta, x):
            p.zero_grad()
        out, cache = numkit.batchnorm(x.value, state, training=True, update_running=False)
        x.grad += numkit.batchnorm_backward(cache, coef)
        return float((out * coef).sum())

    err = numkit.grad_check(loss_fn, [state.gamma, state.beta, x], eps=1e-5)
    assert err < 1e-4


def test_batchnorm_backward_rejects_eval_cache():
    state = BatchNormState.create(2)
    _, cache = numkit.batchnorm(np.ones((3, 2)), state, training=False)
    with pytest.raises(ValidationError):
        numkit.batchnorm_backward(cache, np.ones((3, 2)))


# --- adam --------------------------------------------------------------------


def test_adam_zero_grad_is_noop():
    p = Parameter.of([1.0, -2.0])
    s = AdamState.for_parameter(p)
    numkit.adam_step(p, s, lr=0.1)
    assert np.array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = Parameter.of([1.0])
    s = AdamState.for_parameter(p)
    p.grad[...] = 0.5
    numkit.adam_step(p, s, lr=0.01)
    # bias-corrected m/sqrt(v) = sign(g) at t=1
    assert p.value[0] == pytest.approx(1.0 - 0.01, abs=1e-8)


def test_adam_decay_only_step():
    p = Parameter.of([1.0])
    s = AdamState.for_parameter(p)
    numkit.adam_step(p, s, lr=0.1, weight_decay=0.01)
    assert p.value[0] == pytest.approx(0.999, abs=1e-15)


def test_adam_bit_identical_given_same_inputs():
    def run():
        rng = numkit.make_rng(13, 4)
        p = Parameter.of(rng.standard_normal(8))
        s = AdamState.for_parameter(p)
        for _ in range(25):
            p.grad[...] = rng.standard_normal(8)
            numkit.adam_step(p, s, lr=3e-4, weight_decay=0.01)
            p.zero_grad()
        return p.value.tobytes()

    assert run() == run()


# --- grad_check --------------------------------------------------------------


def test_gradcheck_quadratic():
    x = Parameter.of([1.0, 2.0])

    def loss_fn():
        x.zero_grad()
        x.grad += 2.0 * x.value
        return float((x.value**2).sum())

    assert numkit.grad_check(loss_fn, [x]) < 1e-9


def test_gradcheck_affine_tanh_chain():
    rng = numkit.make_rng(21, 5)
    w = Parameter.of(rng.standard_normal((3, 2)) * 0.5)
    b = Parameter.of(rng.standard_normal(2) * 0.1)
    x = rng.standard_normal((4, 3))

    def loss_fn():
        w.zero_grad()
        b.zero_grad()
        h, cache_a = numkit.affine(x, w, b)
        out, cache_t = numkit.tanh_op(h)
        d_h = numkit.tanh_backward(cache_t, np.ones_like(out))
        numkit.affine_backward(cache_a, d_h)
        return float(out.sum())

    assert numkit.grad_check(loss_fn, [w, b], eps=1e-6) < 1e-6


def test_gradcheck_aborts_on_nondeterministic_loss():
    rng = numkit.make_rng(2, 6)
    p = Parameter.of([1.0])

    def loss_fn():
        return float(rng.random())

    with pytest.raises(NumericError):
        numkit.grad_check(loss_fn, [p])


# --- rng plumbing ------------------------------------------------------------


def test_make_rng_streams_are_independent_and_reproducible():
    a = numkit.make_rng(5, 1).random(4)
    b = numkit.make_rng(5, 1).random(4)
    c = numkit.make_rng(5, 2).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_make_rng_rejects_negative_seed():
    with pytest.raises(ConfigError):
        numkit.make_rng(-1)


def test_derive_seed_is_stable():
    assert numkit.derive_seed(7, 1, 2) == numkit.derive_seed(7, 1, 2)
    assert numkit.derive_seed(7, 1, 2) != numkit.derive_seed(7, 1, 3)
