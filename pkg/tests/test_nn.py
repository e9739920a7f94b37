import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from helpers import LAYER_KIND_NAMES, KinkCrossed, central_diff, grad_close, model_for_kind, region
from provgraph.nn import (AdamState, Conv2d, Dense, Flatten, MaxPool2d, NumericalError, ReLU, ShapeError,
                          TargetModel, adam_step, cross_entropy, forward, forward_batch, grad_input,
                          grad_params, loss_and_grad_params)


def test_identity_dense():
    m = TargetModel([Dense(np.eye(2), np.zeros(2))], (2,), 2)
    np.testing.assert_array_equal(forward(m, [1.5, -2.0]).logits, [1.5, -2.0])


def test_relu_definition():
    out, _ = ReLU().forward(np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out[0], [0.0, 0.0, 2.0])


def test_two_layer_mlp_hand_computed(tiny_mlp):
    # hidden pre-activations [-0.4, 0.55] -> relu [0, 0.55]; logits [0.5, 0.55]
    logits = forward(tiny_mlp, [0.3, 0.7]).logits
    np.testing.assert_allclose(logits, [0.5, 0.5499999999999998], rtol=0, atol=1e-15)


def test_shape_error_names_layer():
    with pytest.raises(ShapeError) as err:
        TargetModel([Dense(np.eye(3), np.zeros(3)), Dense(np.ones((2, 4)), np.zeros(2))], (3,), 2)
    assert err.value.layer_index == 1
    m = TargetModel([Dense(np.eye(2), np.zeros(2))], (2,), 2)
    with pytest.raises(ShapeError):
        forward(m, np.zeros(3))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_is_a_hard_error():
    m = TargetModel([Dense(np.array([[1e308, 1e308]]).repeat(2, 0), np.zeros(2))], (2,), 2)
    with pytest.raises(NumericalError):
        forward(m, [10.0, 10.0])


def test_cross_entropy_values():
    assert cross_entropy([0.0, 0.0], 0) == pytest.approx(np.log(2), abs=1e-12)
    # log(1 + e^-20) = e^-20 to first order; the square term is ~1e-18 relative
    assert cross_entropy([10.0, -10.0], 0) == pytest.approx(2.061153618190204e-09, rel=1e-9)
    # -ln(e^3 / (e + e^2 + e^3)) by direct arithmetic
    assert cross_entropy([1.0, 2.0, 3.0], 2) == pytest.approx(0.4076059644443803, abs=1e-14)
    with pytest.raises(ValueError):
        cross_entropy([0.0, 1.0], 2)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100), st.data())
def test_cross_entropy_shift_invariance(logits, c, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    a = cross_entropy(np.array(logits), label)
    b = cross_entropy(np.array(logits) + c, label)
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_constant_model_zero_input_gradient():
    m = TargetModel([Dense(np.zeros((3, 4)), np.ones(3)), ReLU(), Dense(np.ones((2, 3)), np.zeros(2))], (4,), 2)
    np.testing.assert_array_equal(grad_input(m, np.full(4, 0.5), 1), np.zeros(4))


def test_single_dense_gradient_closed_form():
    # grad_x = W^T (softmax(Wx + b) - onehot), evaluated with plain math
    m = TargetModel([Dense(np.array([[2.0, -1.0], [0.5, 1.0]]), np.array([0.0, 0.1]))], (2,), 2)
    np.testing.assert_allclose(grad_input(m, [0.4, 0.6], 1), [0.49771834174775087, -0.6636244556636677],
                               rtol=1e-12)


@pytest.mark.parametrize("kind", LAYER_KIND_NAMES)
def test_gradients_match_finite_differences(kind):
    for seed in range(5):
        m = model_for_kind(kind, seed)
        rng = np.random.default_rng(100 + seed)
        while True:
            x = rng.normal(size=m.input_shape)
            y = int(rng.integers(m.num_classes))
            try:
                num = central_diff(lambda v: cross_entropy(forward(m, v).logits, y), x,
                                   pattern=lambda v: region(m, v))
                break
            except KinkCrossed:
                continue
        assert grad_close(grad_input(m, x, y), num)


def test_duplicated_batch_gives_same_gradients():
    m = model_for_kind("relu", 0)
    x = np.linspace(-1, 1, 5)
    once = grad_params(m, [(x, 1)])
    twice = grad_params(m, [(x, 1), (x, 1)])
    for a, b in zip(once, twice):
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)
    with pytest.raises(ValueError):
        grad_params(m, [])


def test_zero_output_layer_bias_gradient():
    # zero weights and bias give uniform softmax: grad_b = mean(softmax - onehot)
    m = TargetModel([Dense(np.zeros((2, 3)), np.zeros(2))], (3,), 2)
    xs = np.random.default_rng(0).normal(size=(4, 3))
    _, grads = loss_and_grad_params(m, xs, [0, 0, 1, 0])
    np.testing.assert_allclose(grads[1], [0.5 - 0.75, 0.5 - 0.25], atol=1e-15)


def test_forward_is_pure():
    m = model_for_kind("maxpool2d", 3)
    x = np.random.default_rng(1).random(m.input_shape)
    a = forward(m, x).logits
    b = forward(m, x).logits
    assert a.tobytes() == b.tobytes()
    assert forward_batch(m, x[None])[0].tobytes() == a.tobytes()


def test_relu_nonnegative_and_pool_picks_window_elements():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 6, 6))
    r, _ = ReLU().forward(x)
    assert np.all(r >= 0)
    p, _ = MaxPool2d(2).forward(x)
    for n in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    assert p[n, c, i, j] in x[n, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]


def test_maxpool_tie_goes_to_first_element():
    x = np.ones((1, 1, 2, 2))
    _, cache = MaxPool2d(2).forward(x)
    g, _ = MaxPool2d(2).backward(cache, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(2)
    conv = Conv2d(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2), stride=2, padding=1)
    x = rng.normal(size=(1, 3, 5, 5))
    out, _ = conv.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 3))
    for o in range(2):
        for i in range(3):
            for j in range(3):
                ref[o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * conv.weight[o]) + conv.bias[o]
    np.testing.assert_allclose(out[0], ref, rtol=1e-12, atol=1e-12)


def test_flatten_roundtrip():
    x = np.arange(24.0).reshape(2, 3, 2, 2)
    out, shape = Flatten().forward(x)
    assert out.shape == (2, 12)
    np.testing.assert_array_equal(Flatten().backward(shape, out)[0], x)


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    state = AdamState([np.array([0.5, 0.5])], [np.array([0.1, 0.1])], 3)
    new_p, new_state = adam_step(p, [np.zeros(2)], state, 0.1)
    np.testing.assert_allclose(np.abs(new_state.m[0]), 0.45)
    assert np.all(np.abs(new_state.v[0]) < 0.1)
    assert new_state.step == 4
    # zero moments and zero gradient: parameters stay put
    fresh, _ = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), 0.1)
    np.testing.assert_array_equal(fresh[0], p[0])


def test_adam_first_step_scalar():
    # m_hat = g, v_hat = g^2 -> p - lr * g / (|g| + eps) = 1 - 0.1 * 0.5 / (0.5 + 1e-8)
    new_p, state = adam_step([np.array([1.0])], [np.array([0.5])], AdamState.zeros_like([np.array([1.0])]), 0.1)
    assert new_p[0][0] == pytest.approx(0.900000002, abs=1e-12)
    assert state.step == 1


def test_adam_constant_gradient_moves_monotonically():
    p = [np.array([0.0, 0.0])]
    g = [np.array([1.0, -2.0])]
    state = AdamState.zeros_like(p)
    p1, state = adam_step(p, g, state, 0.01)
    p2, state = adam_step(p1, g, state, 0.01)
    assert p2[0][0] < p1[0][0] < 0 and p2[0][1] > p1[0][1] > 0


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]), 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(LAYER_KIND_NAMES))
def test_param_gradients_property(seed, kind):
    m = model_for_kind(kind, seed)
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(2,) + m.input_shape)
    ys = rng.integers(m.num_classes, size=2)
    _, grads = loss_and_grad_params(m, xs, ys)
    params = m.params
    for k, p in enumerate(params):
        def f(v, k=k):
            trial = list(m.params)
            trial[k] = v
            m.set_params(trial)
            loss = loss_and_grad_params(m, xs, ys)[0]
            m.set_params(params)
            return loss

        def pattern(v, k=k):
            trial = list(m.params)
            trial[k] = v
            m.set_params(trial)
            out = b"".join(region(m, x) for x in xs)
            m.set_params(params)
            return out
        try:
            num = central_diff(f, p, pattern=pattern)
        except KinkCrossed:
            assume(False)
        assert grad_close(grads[k], num)
