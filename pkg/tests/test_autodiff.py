import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import naive_conv3d, naive_conv_transpose3d, numeric_vs_analytic
from dectseg.autodiff import (
    NonFiniteError,
    OptimizerState,
    RunningStats,
    Tensor,
    backward,
    batchnorm3d,
    concat,
    conv3d,
    conv_transpose3d,
    inverse_frequency_weights,
    maxpool3d,
    optimizer_step,
    relu,
    set_finite_checks,
    softmax_channel,
    topological_order,
    weighted_cross_entropy,
)


# -- forward values -----------------------------------------------------------------

def test_conv_identity_and_hand_sum():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 3, 3)).astype(np.float32)
    out = conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)
    out = conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))))
    assert out.shape == (1, 1, 1, 1, 1) and out.data.item() == 8.0


def test_conv_matches_naive_loop_on_spec_shape(rng):
    x = rng.normal(size=(1, 2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    got = conv3d(Tensor(x, dtype=np.float32), Tensor(w, dtype=np.float32), Tensor(b, dtype=np.float32), padding=1)
    assert np.max(np.abs(got.data - naive_conv3d(x, w, b, pad=1))) < 1e-5 * max(1, np.abs(got.data).max())


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k,pad", [(1, 0), (2, 0), (3, 1), (3, 0)])
def test_conv_oracle_small_shapes(rng, stride, k, pad):
    for extent in (3, 4):
        x = rng.normal(size=(2, 3, extent, max(extent - 1, k), extent))
        w = rng.normal(size=(2, 3, k, k, k))
        got = conv3d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, naive_conv3d(x, w, stride=stride, pad=pad), atol=1e-10)


def test_conv_same_padding_and_errors(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 6, 7)))
    assert conv3d(x, Tensor(rng.normal(size=(4, 2, 3, 3, 3))), padding="same").shape == (1, 4, 5, 6, 7)
    with pytest.raises(ValueError):
        conv3d(x, Tensor(rng.normal(size=(4, 3, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 3, 3))))


def test_conv_transpose_hand_and_zero():
    out = conv_transpose3d(Tensor(np.full((1, 1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2, 2) and np.all(out.data == 2.5)
    z = conv_transpose3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.ones((2, 3, 2, 2, 2))), stride=2)
    assert z.shape == (1, 3, 6, 6, 6) and not z.data.any()
    with pytest.raises(ValueError):
        conv_transpose3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))), stride=3)


@pytest.mark.parametrize("stride,k", [(2, 2), (1, 2), (2, 3), (1, 3)])
def test_conv_transpose_oracle(rng, stride, k):
    x = rng.normal(size=(2, 3, 3, 2, 3))
    w = rng.normal(size=(3, 2, k, k, k))
    b = rng.normal(size=2)
    got = conv_transpose3d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
    np.testing.assert_allclose(got, naive_conv_transpose3d(x, w, b, stride), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_transpose_is_adjoint_of_strided_conv(seed, stride):
    r = np.random.default_rng(seed)
    w = r.normal(size=(2, 3, 2, 2, 2))  # conv: 3 -> 2 channels
    x = r.normal(size=(1, 3, 4, 4, 4))
    cx = conv3d(Tensor(x), Tensor(w), stride=stride).data
    y = r.normal(size=cx.shape)
    # the transpose weight layout (in, out, ...) equals the conv layout (out, in, ...)
    ty = conv_transpose3d(Tensor(y), Tensor(w), stride=stride).data
    lhs = float((cx * y).sum())
    rhs = float((x * ty[:, :, :4, :4, :4]).sum())
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_maxpool_values_and_tie_break():
    x = Tensor(np.arange(1, 9, dtype=np.float64).reshape(1, 1, 2, 2, 2), requires_grad=True)
    out = maxpool3d(x)
    assert out.data.item() == 8.0
    c = Tensor(np.ones((1, 1, 4, 4, 4)), requires_grad=True)
    p = maxpool3d(c)
    assert p.shape == (1, 1, 2, 2, 2) and np.all(p.data == 1)
    backward(p.sum())
    g = c.grad[0, 0]
    assert g.sum() == 8
    assert np.all(g[::2, ::2, ::2] == 1)
    assert maxpool3d(Tensor(np.zeros((1, 1, 8, 8, 8)))).shape == (1, 1, 4, 4, 4)
    assert maxpool3d(Tensor(np.zeros((1, 1, 5, 5, 5)))).shape == (1, 1, 3, 3, 3)


def test_relu_and_concat():
    assert relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]
    a = Tensor(np.zeros((1, 3, 2, 2, 2)))
    b = Tensor(np.ones((1, 5, 2, 2, 2)))
    c = concat([a, b])
    assert c.shape == (1, 8, 2, 2, 2)
    assert not c.data[:, :3].any() and c.data[:, 3:].all()
    with pytest.raises(ValueError):
        concat([a, Tensor(np.ones((1, 5, 2, 2, 3)))])


def test_relu_gradient_away_from_kink():
    x = Tensor(np.array([-0.7, 1.3]), requires_grad=True)
    backward(relu(x).sum())
    assert x.grad.tolist() == [0.0, 1.0]


def test_batchnorm_train_statistics(rng):
    x = Tensor(rng.normal(3.0, 2.0, size=(2, 3, 4, 4, 4)))
    stats = RunningStats.create(3)
    y = batchnorm3d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, "train").data
    assert np.all(np.abs(y.mean(axis=(0, 2, 3, 4))) < 1e-4)
    assert np.all(np.abs(y.var(axis=(0, 2, 3, 4)) - 1) < 1e-3)
    assert np.allclose(stats.mean, 0.1 * x.data.mean(axis=(0, 2, 3, 4)), atol=1e-5)


def test_batchnorm_eval_identity_and_errors(rng):
    x = rng.normal(size=(1, 2, 2, 2, 2))
    y = batchnorm3d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), RunningStats.create(2), "eval").data
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), rtol=1e-6)
    with pytest.raises(ValueError):
        batchnorm3d(Tensor(np.ones((1, 2, 1, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), RunningStats.create(2))


def test_softmax_examples():
    p = softmax_channel(Tensor(np.zeros((1, 5, 1, 1, 1)))).data
    np.testing.assert_allclose(p, 0.2)
    p = softmax_channel(Tensor(np.log(np.array([1.0, 3.0])).reshape(1, 2, 1, 1, 1))).data.ravel()
    np.testing.assert_allclose(p, [0.25, 0.75])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 100.0, 1e4]))
def test_softmax_normalized_and_stable(seed, scale):
    z = np.random.default_rng(seed).normal(size=(2, 5, 3, 3, 3)) * scale
    p = softmax_channel(Tensor(z, dtype=np.float32)).data
    assert np.all(p >= 0) and np.all(np.isfinite(p))
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-5


def test_cross_entropy_contract(rng):
    target = rng.integers(0, 5, (1, 3, 3, 3))
    uniform = weighted_cross_entropy(Tensor(np.zeros((1, 5, 3, 3, 3))), target, np.ones(5))
    assert abs(uniform.item() - math.log(5)) < 1e-6
    confident = np.where(np.arange(5)[None, :, None, None, None] == target[:, None], 50.0, -50.0)
    assert weighted_cross_entropy(Tensor(confident), target, np.ones(5)).item() <= 1e-6
    logits = Tensor(rng.normal(size=(1, 5, 3, 3, 3)))
    w = rng.uniform(0.1, 10, 5)
    a = weighted_cross_entropy(logits, target, w).item()
    assert abs(a - weighted_cross_entropy(logits, target, 2 * w).item()) < 1e-6
    with pytest.raises(ValueError):
        weighted_cross_entropy(logits, target, w, np.zeros(target.shape, bool))


def test_cross_entropy_mask_restricts_voxels(rng):
    logits = Tensor(rng.normal(size=(1, 5, 2, 2, 2)))
    target = rng.integers(0, 5, (1, 2, 2, 2))
    mask = np.zeros(target.shape, bool)
    mask[0, 0, 0, 0] = True
    z = logits.data[0, :, 0, 0, 0].astype(np.float64)
    expected = -(z[target[0, 0, 0, 0]] - np.log(np.exp(z).sum()))
    assert abs(weighted_cross_entropy(logits, target, np.ones(5), mask).item() - expected) < 1e-5


def test_inverse_frequency_weights():
    labels = [np.array([0] * 90 + [1] * 9 + [2] * 1)]
    w = inverse_frequency_weights(labels, n_classes=3)
    np.testing.assert_allclose(w, [100 / 270, 100 / 27, 10.0])
    assert inverse_frequency_weights([np.zeros(10, int)], 2).tolist() == [0.5, 10.0]


# -- engine mechanics -----------------------------------------------------------------

def test_backward_hand_derivative_and_accumulation():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]
    backward((x * x).sum())
    assert x.grad.tolist() == [4.0, 8.0]
    unused = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum() + (unused * 0.0).sum()
    backward(loss)
    assert not unused.grad.any()
    with pytest.raises(ValueError):
        backward(x * x)


def test_each_node_visited_once():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * x
    z = (y + y) * y  # diamond
    loss = z.sum()
    order = topological_order(loss)
    assert len(order) == len({id(n) for n in order})
    assert order[0] is x and order[-1] is loss
    backward(loss)
    np.testing.assert_allclose(x.grad, 8 * np.ones(3))  # d(2x^4)/dx = 8x^3


def test_non_finite_trips():
    x = Tensor(np.array([1e30], np.float32))
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError):
            x * x
        set_finite_checks(False)
        try:
            assert np.isinf((x * x).data).all()
        finally:
            set_finite_checks(True)


def test_adam_first_step_and_zero_grad():
    p = {"w": np.array([1.0, -1.0, 0.5])}
    optimizer_step(p, {"w": np.array([0.3, -2.0, 0.0])}, OptimizerState(lr=0.01))
    np.testing.assert_allclose(p["w"], [0.99, -0.99, 0.5], atol=1e-7)
    q = {"w": np.array([1.0, 2.0])}
    optimizer_step(q, {"w": np.zeros(2)}, OptimizerState())
    assert q["w"].tolist() == [1.0, 2.0]


def test_adam_deterministic(rng):
    g = rng.normal(size=(10, 4))
    runs = []
    for _ in range(2):
        p = {"w": np.zeros(4, np.float32)}
        s = OptimizerState(lr=1e-2)
        for row in g:
            optimizer_step(p, {"w": row.astype(np.float32)}, s)
        runs.append(p["w"].tobytes())
    assert runs[0] == runs[1]


# -- gradient checks per op -------------------------------------------------------------

def _ok(errors):
    return np.mean(errors < 1e-3) >= 0.99


def test_grad_conv3d(rng):
    x, w, b = rng.normal(size=(2, 2, 4, 4, 3)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    proj = rng.normal(size=(2, 3, 4, 4, 3))
    assert _ok(numeric_vs_analytic(lambda x, w, b: (conv3d(x, w, b, padding=1) * proj).sum(), [x, w, b]))
    xs = rng.normal(size=(2, 2, 4, 4, 4))
    proj2 = rng.normal(size=(2, 3, 2, 2, 2))
    assert _ok(numeric_vs_analytic(lambda x, w: (conv3d(x, w, stride=2, padding=1) * proj2).sum(), [xs, w]))


def test_grad_conv_transpose3d(rng):
    x, w, b = rng.normal(size=(2, 3, 2, 3, 2)), rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=2)
    proj = rng.normal(size=(2, 2, 4, 6, 4))
    assert _ok(numeric_vs_analytic(lambda x, w, b: (conv_transpose3d(x, w, b) * proj).sum(), [x, w, b]))


def test_grad_maxpool_relu_concat(rng):
    x = rng.normal(size=(1, 2, 4, 4, 4))
    y = rng.normal(size=(1, 1, 2, 2, 2))
    proj = rng.normal(size=(1, 3, 2, 2, 2))

    def f(x, y):
        return (concat([relu(maxpool3d(x)), y]) * proj).sum()

    assert _ok(numeric_vs_analytic(f, [x, y]))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_grad_batchnorm(rng, mode):
    x, g, b = rng.normal(size=(2, 3, 3, 3, 3)), rng.normal(size=3), rng.normal(size=3)
    proj = rng.normal(size=x.shape)
    stats = RunningStats(np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.5, 2.0]))
    f = lambda x, g, b: (batchnorm3d(x, g, b, stats, mode) * proj).sum()  # noqa: E731
    assert _ok(numeric_vs_analytic(f, [x, g, b]))


def test_grad_softmax_and_loss(rng):
    z = rng.normal(size=(2, 5, 2, 3, 2))
    proj = rng.normal(size=z.shape)
    assert _ok(numeric_vs_analytic(lambda z: (softmax_channel(z) * proj).sum(), [z]))
    target = rng.integers(0, 5, (2, 2, 3, 2))
    mask = rng.random(target.shape) < 0.7
    w = rng.uniform(0.1, 10, 5)
    assert _ok(numeric_vs_analytic(lambda z: weighted_cross_entropy(z, target, w, mask), [z]))


def test_grad_elementwise(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert _ok(numeric_vs_analytic(lambda a, b: ((a - b) * (a + 2.0)).mean() + (a**2).sum(), [a, b]))
