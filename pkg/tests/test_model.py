import math

import numpy as np
import pytest

from gradma.data import Dataset
from gradma.model import (
    Architecture,
    Batch,
    NonFiniteError,
    evaluate,
    full_grad,
    init_params,
    loss_and_grad,
    predict_logits,
    unflatten,
)

SHAPES = [
    Architecture(6, (), 3),
    Architecture(5, (7,), 4),
    Architecture(8, (6, 5, 4), 3),
]


def random_batch(arch, n, seed):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, arch.input_dim)), rng.integers(0, arch.num_classes, n))


def central_difference(arch, x, batch, j, h=1e-5):
    e = np.zeros_like(x)
    e[j] = h
    return (loss_and_grad(arch, x + e, batch)[0] - loss_and_grad(arch, x - e, batch)[0]) / (2 * h)


def test_parameter_counts():
    assert Architecture(784, (), 10).num_params == 7850
    assert Architecture(784, (200, 200, 200), 10).num_params == 784 * 200 + 200 + 2 * (200 * 200 + 200) + 2010


def test_invalid_architecture():
    with pytest.raises(ValueError):
        Architecture(0, (), 3)
    with pytest.raises(ValueError):
        Architecture(4, (3,), 2, activation="tanh")


def test_init_is_deterministic_with_zero_biases():
    arch = SHAPES[2]
    a, b = init_params(arch, 7), init_params(arch, 7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, init_params(arch, 8))
    for sl in arch.bias_slices():
        assert np.all(a[sl] == 0.0)


def test_init_respects_glorot_bound():
    arch = Architecture(30, (20,), 5)
    for (W, _), (fi, fo) in zip(unflatten(arch, init_params(arch, 0)), arch.layer_dims):
        assert np.abs(W).max() <= math.sqrt(6 / (fi + fo))


def test_layout_is_weight_then_bias():
    arch = Architecture(2, (), 3)
    x = np.arange(9, dtype=float)
    (W, b), = unflatten(arch, x)
    np.testing.assert_array_equal(W, [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_array_equal(b, [6, 7, 8])


@pytest.mark.parametrize("arch", SHAPES, ids=lambda a: f"{a.input_dim}-{a.hidden_dims}-{a.num_classes}")
def test_gradient_matches_finite_differences(arch):
    rng = np.random.default_rng(1)
    x = init_params(arch, 1) + 0.05 * rng.normal(size=arch.num_params)
    batch = random_batch(arch, 12, 2)
    _, g = loss_and_grad(arch, x, batch)
    for j in rng.choice(arch.num_params, min(50, arch.num_params), replace=False):
        fd = central_difference(arch, x, batch, j)
        assert abs(fd - g[j]) <= 1e-5 * max(abs(fd), abs(g[j]), 1e-4)


def test_gradient_matches_autograd():
    torch = pytest.importorskip("torch")
    arch = Architecture(9, (8, 6), 4)
    x = init_params(arch, 3) + 0.1 * np.random.default_rng(3).normal(size=arch.num_params)
    batch = random_batch(arch, 20, 4)
    loss, g = loss_and_grad(arch, x, batch)

    xt = torch.tensor(x, requires_grad=True)
    h = torch.tensor(batch.features)
    off = 0
    for k, (i, o) in enumerate(arch.layer_dims):
        W = xt[off:off + i * o].reshape(i, o)
        off += i * o
        b = xt[off:off + o]
        off += o
        h = h @ W + b
        if k < len(arch.layer_dims) - 1:
            h = torch.relu(h)
    ref = torch.nn.functional.cross_entropy(h, torch.tensor(batch.labels))
    ref.backward()
    assert loss == pytest.approx(ref.item(), rel=1e-12)
    np.testing.assert_allclose(g, xt.grad.numpy(), rtol=1e-10, atol=1e-13)


def test_duplicated_batch_gives_same_loss_and_grad():
    arch = SHAPES[1]
    x = init_params(arch, 0)
    batch = random_batch(arch, 10, 0)
    doubled = Batch(np.repeat(batch.features, 2, axis=0), np.repeat(batch.labels, 2))
    l1, g1 = loss_and_grad(arch, x, batch)
    l2, g2 = loss_and_grad(arch, x, doubled)
    assert l1 == pytest.approx(l2, rel=1e-14)
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_zero_logistic_model_has_log_k_loss():
    arch = Architecture(784, (), 10)
    loss, _ = loss_and_grad(arch, np.zeros(arch.num_params), random_batch(arch, 5, 0))
    assert loss == pytest.approx(math.log(10), rel=1e-14)


def test_outputs_are_bit_identical_on_repeat():
    arch = SHAPES[2]
    x = init_params(arch, 4)
    batch = random_batch(arch, 9, 4)
    l1, g1 = loss_and_grad(arch, x, batch)
    l2, g2 = loss_and_grad(arch, x, batch)
    assert l1 == l2 and np.array_equal(g1, g2)


def test_non_finite_forward_raises():
    arch = SHAPES[0]
    x = np.full(arch.num_params, np.inf)
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
        loss_and_grad(arch, x, random_batch(arch, 3, 0))


def test_full_grad_single_batch_and_halves():
    arch = SHAPES[1]
    x = init_params(arch, 2)
    b = random_batch(arch, 30, 5)
    ds = Dataset(b.features, b.labels, arch.num_classes)
    whole = loss_and_grad(arch, x, b)[1]
    np.testing.assert_array_equal(full_grad(arch, x, ds), whole)
    # chunked accumulation is the size-weighted mean of chunk gradients
    np.testing.assert_allclose(full_grad(arch, x, ds, chunk=7), whole, rtol=1e-12, atol=1e-15)
    g_a = loss_and_grad(arch, x, Batch(b.features[:11], b.labels[:11]))[1]
    g_b = loss_and_grad(arch, x, Batch(b.features[11:], b.labels[11:]))[1]
    np.testing.assert_allclose((11 * g_a + 19 * g_b) / 30, whole, rtol=1e-12, atol=1e-15)


def test_full_grad_empty_raises():
    arch = SHAPES[0]

    class Empty:
        labels = np.zeros(0, dtype=int)
        features = np.zeros((0, 6))

    with pytest.raises(ValueError):
        full_grad(arch, np.zeros(arch.num_params), Empty())


def test_evaluate_constant_argmax():
    arch = Architecture(3, (), 4)
    x = np.zeros(arch.num_params)
    x[arch.bias_slices()[0]] = [0.0, 0.0, 5.0, 0.0]
    ds = Dataset(np.random.default_rng(0).normal(size=(8, 3)), np.full(8, 2), 4)
    assert evaluate(arch, x, ds)[0] == 1.0


def test_evaluate_tie_goes_to_lowest_class():
    arch = Architecture(4, (), 10)
    ds = Dataset(np.ones((100, 4)), np.repeat(np.arange(10), 10), 10)
    acc, loss = evaluate(arch, np.zeros(arch.num_params), ds)
    assert acc == 0.1
    assert loss == pytest.approx(math.log(10), rel=1e-14)


def test_evaluate_loss_matches_training_loss():
    arch = SHAPES[2]
    x = init_params(arch, 9)
    b = random_batch(arch, 50, 9)
    ds = Dataset(b.features, b.labels, arch.num_classes)
    assert evaluate(arch, x, ds, chunk=16)[1] == pytest.approx(loss_and_grad(arch, x, b)[0], rel=1e-12)
    assert predict_logits(arch, x, b.features).shape == (50, 3)
