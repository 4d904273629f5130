"""Testes do núcleo numérico: kernels, gradientes e otimizador."""
import numpy as np
import pytest

from maod.exceptions import DataError, GraphError, ShapeError
from maod.gradcheck import check_gradients, numerical_gradient, relative_error
from maod.tensor_core import (SGD, ConvSpec, Tensor, add, backward, channel_shuffle, conv2d, conv_param_count,
                              depthwise_separable, dropout, global_avg_pool, linear, make_rng,
                              no_grad, relu, reshape, separable_param_count, sigmoid, softmax,
                              squared_error, standard_param_count, weighted_cross_entropy, weighted_sum)

TOLERANCE = 1e-5


def naive_conv(x, w, stride, padding, mode):
    """Correlação cruzada por laços explícitos (C×H×W)."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((o, ho, wo))
    m = o // c
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                if mode == 'depthwise':
                    out[oc, i, j] = (patch[oc // m] * w[oc, 0]).sum()
                else:
                    out[oc, i, j] = (patch * w[oc]).sum()
    return out


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ===========================
# CONVOLUÇÃO
# ===========================
@pytest.mark.parametrize('mode', ['standard', 'depthwise', 'pointwise'])
def test_conv2d_matches_naive_loops(mode):
    rng = make_rng(0)
    for _ in range(10):
        c = int(rng.integers(1, 4))
        o = c * int(rng.integers(1, 3)) if mode == 'depthwise' else int(rng.integers(1, 4))
        k = 1 if mode == 'pointwise' else int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = 0 if mode == 'pointwise' else int(rng.integers(0, 2))
        h = int(rng.integers(k, 8))
        spec = ConvSpec(c, o, k, stride, padding, mode)
        x = rng.normal(size=(c, h, h + 1))
        w = rng.normal(size=spec.weight_shape())
        out = conv2d(Tensor(x), Tensor(w), spec)
        np.testing.assert_allclose(out.data, naive_conv(x, w, stride, padding, mode), atol=1e-12)


def test_conv2d_all_ones_kernel_sums_window():
    spec = ConvSpec(1, 1, 3)
    x = np.arange(25, dtype=float).reshape(1, 5, 5)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), spec)
    assert out.shape == (1, 3, 3)
    assert out.data[0, 0, 0] == pytest.approx(x[0, :3, :3].sum())


def test_conv2d_batched_equals_per_sample(rng):
    spec = ConvSpec(2, 3, 3, 2, 1)
    x = rng.normal(size=(4, 2, 7, 7))
    w = rng.normal(size=spec.weight_shape())
    batched = conv2d(Tensor(x), Tensor(w), spec).data
    for i in range(4):
        np.testing.assert_allclose(batched[i], conv2d(Tensor(x[i]), Tensor(w), spec).data, atol=1e-12)


def test_conv2d_rejects_mismatched_channels(rng):
    spec = ConvSpec(3, 4, 3)
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.normal(size=(2, 5, 5))), Tensor(rng.normal(size=(4, 3, 3, 3))), spec)


def test_conv_spec_rejects_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, 5).output_hw(3, 3)


def test_depthwise_separable_equals_two_stage_oracle(rng):
    for _ in range(20):
        c, o, k = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        x = rng.normal(size=(c, 6, 6))
        dw = rng.normal(size=(c, 1, k, k))
        pw = rng.normal(size=(o, c, 1, 1))
        composed = depthwise_separable(Tensor(x), Tensor(dw), Tensor(pw), stride=stride).data
        stage1 = naive_conv(x, dw, stride, k // 2, 'depthwise')
        stage2 = naive_conv(stage1, pw, 1, 0, 'pointwise')
        np.testing.assert_allclose(composed, stage2, atol=1e-12, rtol=0)


def test_depthwise_separable_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        depthwise_separable(Tensor(rng.normal(size=(3, 5, 5))), Tensor(rng.normal(size=(3, 1, 3, 3))),
                            Tensor(rng.normal(size=(4, 2, 1, 1))))


@pytest.mark.parametrize('mode', ['standard', 'depthwise', 'pointwise'])
def test_conv2d_is_linear_in_the_input(mode):
    rng = make_rng(11)
    for _ in range(20):
        c = int(rng.integers(1, 4))
        o = c * int(rng.integers(1, 3)) if mode == 'depthwise' else int(rng.integers(1, 4))
        k = 1 if mode == 'pointwise' else int(rng.integers(1, 4))
        spec = ConvSpec(c, o, k, int(rng.integers(1, 3)), 0 if mode == 'pointwise' else int(rng.integers(0, 2)),
                        mode)
        h = int(rng.integers(k, 8))
        w = Tensor(rng.normal(size=spec.weight_shape()))
        x, y = rng.normal(size=(c, h, h)), rng.normal(size=(c, h, h))
        a, b = rng.normal(size=2)
        combined = conv2d(Tensor(a * x + b * y), w, spec).data
        separate = a * conv2d(Tensor(x), w, spec).data + b * conv2d(Tensor(y), w, spec).data
        np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-10)


@pytest.mark.parametrize('mode, k', [('standard', 3), ('pointwise', 1)])
def test_grouped_conv_equals_independent_group_convs(mode, k):
    rng = make_rng(12)
    groups, c, o = 3, 6, 9
    spec = ConvSpec(c, o, k, 1, k // 2, mode, groups)
    assert spec.weight_shape() == (o, c // groups, k, k)
    x = rng.normal(size=(2, c, 5, 5))
    w = rng.normal(size=spec.weight_shape())
    out = conv2d(Tensor(x), Tensor(w), spec).data
    part = ConvSpec(c // groups, o // groups, k, 1, k // 2, mode)
    for g in range(groups):
        expected = conv2d(Tensor(x[:, 2 * g:2 * g + 2]), Tensor(w[3 * g:3 * g + 3]), part).data
        np.testing.assert_allclose(out[:, 3 * g:3 * g + 3], expected, atol=1e-12)
    assert conv_param_count(spec) == o * (c // groups) * k * k


def test_grouped_conv_spec_validation():
    with pytest.raises(ShapeError):
        ConvSpec(6, 8, 1, mode='pointwise', groups=4)
    with pytest.raises(ShapeError):
        ConvSpec(4, 4, 3, mode='depthwise', groups=2)
    with pytest.raises(ShapeError):
        ConvSpec(4, 4, 1, mode='pointwise', groups=0)


def test_channel_shuffle_interleaves_groups():
    x = np.arange(6, dtype=float)[:, None, None] * np.ones((6, 2, 2))
    out = channel_shuffle(Tensor(x), 2).data
    assert out[:, 0, 0].tolist() == [0, 3, 1, 4, 2, 5]
    batched = channel_shuffle(Tensor(np.stack([x, x + 10])), 3).data
    assert batched[1, :, 0, 0].tolist() == [10, 12, 14, 11, 13, 15]
    with pytest.raises(ShapeError):
        channel_shuffle(Tensor(x), 4)


def test_parameter_counts():
    assert standard_param_count(32, 64, 3) == 18432
    assert separable_param_count(32, 64, 3) == 2336
    assert conv_param_count(ConvSpec(32, 32, 3, mode='depthwise')) == 32 * 9
    assert conv_param_count(ConvSpec(32, 64, 1, mode='pointwise')) == 32 * 64
    assert conv_param_count(ConvSpec(32, 64, 1, mode='pointwise'), bias=True) == 32 * 64 + 64


# ===========================
# GRADIENTES
# ===========================
@pytest.mark.parametrize('mode', ['standard', 'depthwise', 'pointwise'])
def test_conv2d_gradients(mode):
    rng = make_rng(1)
    for _ in range(50):
        c = int(rng.integers(1, 3))
        o = c * int(rng.integers(1, 3)) if mode == 'depthwise' else int(rng.integers(1, 3))
        k = 1 if mode == 'pointwise' else int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = 0 if mode == 'pointwise' else int(rng.integers(0, 2))
        spec = ConvSpec(c, o, k, stride, padding, mode)
        h = int(rng.integers(k, 6))
        x, w, b = _param(rng, c, h, h), _param(rng, *spec.weight_shape()), _param(rng, o)
        probe = rng.normal(size=(o,) + spec.output_hw(h, h))
        error = check_gradients(lambda x, w, b: weighted_sum(conv2d(x, w, spec, b), probe), [x, w, b])
        assert error <= TOLERANCE


def test_grouped_conv_and_shuffle_gradients():
    rng = make_rng(13)
    for _ in range(20):
        groups = int(rng.integers(1, 4))
        c, o = groups * int(rng.integers(1, 3)), groups * int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        spec = ConvSpec(c, o, k, int(rng.integers(1, 3)), k // 2, 'standard' if k > 1 else 'pointwise', groups)
        h = int(rng.integers(k, 6))
        x, w, b = _param(rng, 2, c, h, h), _param(rng, *spec.weight_shape()), _param(rng, o)
        weights = rng.normal(size=(2, o) + spec.output_hw(h, h))

        def fn(x, w, b):
            return weighted_sum(channel_shuffle(conv2d(x, w, spec, b), groups), weights)

        assert check_gradients(fn, [x, w, b]) <= TOLERANCE


def test_linear_and_pool_gradients():
    rng = make_rng(2)
    for _ in range(50):
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x, w, b = _param(rng, n), _param(rng, m, n), _param(rng, m)
        probe = rng.normal(size=m)
        assert check_gradients(lambda x, w, b: weighted_sum(linear(x, w, b), probe), [x, w, b]) <= TOLERANCE

        img = _param(rng, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        probe2 = rng.normal(size=2)
        assert check_gradients(lambda t: weighted_sum(global_avg_pool(t), probe2), [img]) <= TOLERANCE


def test_activation_gradients():
    rng = make_rng(3)
    for _ in range(50):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=2))
        values = rng.normal(size=shape)
        # relu não é diferenciável em 0
        values = np.where(np.abs(values) < 0.01, 0.5, values)
        x = Tensor(values, requires_grad=True)
        probe = rng.normal(size=shape)
        for fn in (relu, sigmoid, softmax):
            assert check_gradients(lambda t: weighted_sum(fn(t), probe), [x]) <= TOLERANCE


def test_dropout_gradient_with_fixed_mask():
    rng = make_rng(4)
    for seed in range(50):
        x = _param(rng, 3, 4)
        probe = rng.normal(size=(3, 4))

        def fn(t):
            return weighted_sum(dropout(t, 0.3, 'train', make_rng(seed)), probe)

        assert check_gradients(fn, [x]) <= TOLERANCE


def test_loss_gradients():
    rng = make_rng(5)
    for _ in range(50):
        k = int(rng.integers(2, 7))
        logits = _param(rng, 3, k)
        targets = rng.dirichlet(np.ones(k), size=3)
        alpha = rng.uniform(0.5, 2.0, size=k)
        assert check_gradients(lambda o: weighted_cross_entropy(o, targets, alpha), [logits]) <= TOLERANCE

        pred = _param(rng, 4)
        target = rng.uniform(size=4)
        assert check_gradients(lambda p: squared_error(p, target), [pred]) <= TOLERANCE


def test_add_and_reshape_gradients(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    probe = rng.normal(size=6)
    assert check_gradients(lambda a, b: weighted_sum(reshape(add(a, b), (6,)), probe), [a, b]) <= TOLERANCE


def test_numerical_gradient_restores_array():
    arr = np.array([1.0, 2.0])
    before = arr.copy()
    grad = numerical_gradient(lambda: float((arr ** 2).sum()), arr)
    np.testing.assert_allclose(grad, 2 * before, atol=1e-6)
    np.testing.assert_array_equal(arr, before)


def test_relative_error_zero_for_zero_vectors():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_torch_oracle_for_conv_and_loss():
    torch = pytest.importorskip('torch')
    rng = make_rng(6)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    spec = ConvSpec(3, 3, 3, 2, 1, 'depthwise')
    expected = torch.nn.functional.conv2d(torch.tensor(x), torch.tensor(w), stride=2, padding=1, groups=3)
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w), spec).data, expected.numpy(), atol=1e-12)

    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)
    ce = torch.nn.functional.cross_entropy(torch.tensor(logits), torch.tensor(labels))
    ours = weighted_cross_entropy(Tensor(logits), np.eye(5)[labels], np.ones(5))
    assert ours.item() == pytest.approx(ce.item(), abs=1e-12)


# ===========================
# ATIVAÇÕES, PERDAS E GRAFO
# ===========================
def test_softmax_is_stable_and_normalized():
    out = softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(out))
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert out[0] == pytest.approx(0.5)


def test_softmax_is_shift_invariant():
    rng = make_rng(14)
    for _ in range(50):
        logits = rng.normal(scale=5.0, size=int(rng.integers(2, 10)))
        shift = rng.uniform(-100.0, 100.0)
        np.testing.assert_allclose(softmax(Tensor(logits + shift)).data, softmax(Tensor(logits)).data,
                                   rtol=0, atol=1e-12)


@pytest.mark.parametrize('p', [0.2, 0.5])
def test_dropout_keeps_expected_fraction(p):
    x = Tensor(np.ones((100, 100)))
    out = dropout(x, p, 'train', make_rng(15)).data
    kept = np.count_nonzero(out) / out.size
    assert kept == pytest.approx(1.0 - p, abs=0.02)
    np.testing.assert_allclose(out[out != 0], 1.0 / (1.0 - p))
    assert out.mean() == pytest.approx(1.0, abs=0.05)


def test_sigmoid_stays_in_open_interval():
    out = sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.all(out > 0) and np.all(out < 1)
    assert out[1] == 0.5


def test_dropout_eval_is_identity_and_train_requires_rng(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert dropout(x, 0.5, 'eval') is x
    with pytest.raises(DataError):
        dropout(x, 0.5, 'train')
    with pytest.raises(DataError):
        dropout(x, 1.0, 'train', rng)


def test_weighted_cross_entropy_rejects_non_finite_logits():
    with pytest.raises(DataError):
        weighted_cross_entropy(Tensor([np.nan, 0.0]), np.array([1.0, 0.0]), np.ones(2))


def test_backward_without_graph_raises():
    with pytest.raises(GraphError):
        backward(Tensor([1.0]))
    w = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        loss = weighted_sum(w, np.ones(2))
    with pytest.raises(GraphError):
        backward(loss)


def test_frozen_leaves_get_no_gradient(rng):
    frozen = Tensor(rng.normal(size=3))
    trainable = Tensor(rng.normal(size=3), requires_grad=True)
    backward(weighted_sum(add(frozen, trainable), np.ones(3)))
    assert frozen.grad is None
    np.testing.assert_allclose(trainable.grad, np.ones(3))


def test_sgd_skips_frozen_and_applies_momentum():
    p = Tensor([1.0], requires_grad=True)
    frozen = Tensor([5.0])
    opt = SGD([p, frozen], learning_rate=0.1, momentum=0.5)
    assert opt.params == [p]
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.9)
    opt.step()
    assert p.data[0] == pytest.approx(0.9 - 0.1 * 1.5)
    assert frozen.data[0] == 5.0


def test_sgd_clips_global_gradient_norm():
    p, q = Tensor([0.0], requires_grad=True), Tensor([0.0], requires_grad=True)
    opt = SGD([p, q], learning_rate=1.0, momentum=0.0, clip_norm=1.0)
    p.grad, q.grad = np.array([3.0]), np.array([4.0])
    assert opt.grad_norm() == pytest.approx(5.0)
    opt.step()
    assert (p.data[0], q.data[0]) == pytest.approx((-0.6, -0.8))

    p.grad, q.grad = np.array([0.3]), np.array([0.4])
    opt.step()
    assert (p.data[0], q.data[0]) == pytest.approx((-0.9, -1.2))
    with pytest.raises(DataError):
        SGD([p], learning_rate=0.1, clip_norm=-1.0)
