import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from magekt import diffcore as dc


def rand(shape, seed):
    return dc.tensor(np.random.default_rng(seed).normal(size=shape))


def test_softmax_rows_normalize():
    y = dc.softmax(rand((3, 5), 0))
    assert bool((y > 0).all())
    assert torch.allclose(y.sum(-1), torch.ones(3, dtype=dc.DTYPE), atol=1e-12, rtol=0)


def test_masked_softmax():
    x = rand((2, 4), 1)
    mask = torch.tensor([[True, False, True, False], [False, False, False, True]])
    y = dc.softmax(x, mask)
    assert float(y[0, 1]) == 0.0 and float(y[1, 3]) == 1.0
    with pytest.raises(dc.ShapeError):
        dc.softmax(x, torch.zeros(2, 4, dtype=torch.bool))


def test_sigmoid_zero():
    assert float(dc.sigmoid(dc.tensor([0.0]))) == 0.5


def test_matmul_gradient_on_3x4_by_4x2():
    err = dc.gradient_check(lambda a, b: (dc.matmul(a, b) ** 2).sum(), [rand((3, 4), 2), rand((4, 2), 3)])
    assert err <= 1e-6


PRIMITIVES = {
    "matmul": (lambda a, b: dc.matmul(a, b).sin().sum(), [(3, 4), (4, 2)]),
    "add": (lambda a, b: dc.add(a, b).sin().sum(), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: dc.add(a, b).sin().sum(), [(3, 4), (4,)]),
    "mul": (lambda a, b: dc.mul(a, b).sin().sum(), [(2, 3), (2, 3)]),
    "concat": (lambda a, b: dc.concat([a, b]).sin().sum(), [(2, 3), (2, 2)]),
    "slice": (lambda a: dc.slice_(a, 1, 3).sin().sum(), [(2, 4)]),
    "softmax": (lambda a, w: (dc.softmax(a) * w).sum(), [(3, 4), (3, 4)]),
    "sigmoid": (lambda a: dc.sigmoid(a).sin().sum(), [(3, 3)]),
    "tanh": (lambda a: dc.tanh(a).sin().sum(), [(3, 3)]),
    "layer_norm": (lambda a, g, b: dc.layer_norm(a, g, b).sin().sum(), [(3, 5), (5,), (5,)]),
    "mean": (lambda a: dc.mean(a, 0).sin().sum(), [(4, 3)]),
    "dropout": (lambda a: dc.dropout(a, 0.3, 1234).sin().sum(), [(4, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    f, shapes = PRIMITIVES[name]
    for seed in range(5):
        point = [rand(s, 100 * seed + i) for i, s in enumerate(shapes)]
        assert dc.gradient_check(f, point) <= 1e-6, name


def test_square_at_three():
    assert dc.gradient_check(lambda x: (x * x).sum(), dc.tensor([3.0])) < 1e-8


def test_constant_function_has_zero_gradient():
    x = dc.tensor([1.0, 2.0], requires_grad=True)
    (g,) = torch.autograd.grad((x * 0).sum() + 4.0, [x])
    assert bool((g == 0).all())
    assert dc.gradient_check(lambda x: (x * 0).sum() + 4.0, dc.tensor([1.0, 2.0])) == 0.0


def test_checker_catches_a_wrong_backward():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x * g

    assert dc.gradient_check(lambda x: Wrong.apply(x).sum(), dc.tensor([3.0])) > 0.5


def test_gradients_are_linear_in_the_loss():
    a, b = rand((3, 4), 7).requires_grad_(), rand((4, 2), 8)
    f1 = lambda x: dc.tanh(dc.matmul(x, b)).sum()
    f2 = lambda x: dc.sigmoid(x).pow(2).sum()
    (g_sum,) = torch.autograd.grad(f1(a) + f2(a), [a])
    (g1,) = torch.autograd.grad(f1(a), [a])
    (g2,) = torch.autograd.grad(f2(a), [a])
    assert torch.allclose(g_sum, g1 + g2, atol=1e-14, rtol=0)


def test_shape_and_finiteness_errors():
    with pytest.raises(dc.ShapeError):
        dc.matmul(rand((2, 3), 0), rand((2, 3), 1))
    with pytest.raises(dc.ShapeError):
        dc.mul(rand((2, 3), 0), rand((3, 2), 1))
    with pytest.raises(dc.ShapeError):
        dc.slice_(rand((2, 3), 0), 2, 5)
    with pytest.raises(dc.NonFiniteError):
        dc.add(dc.tensor([1e308]), dc.tensor([1e308]))
    with pytest.raises(dc.NonFiniteError):
        dc.gradient_check(lambda x: (x / 0).sum(), dc.tensor([1.0]))


def test_dropout_eval_identity_and_determinism():
    x = rand((5, 5), 0)
    assert dc.dropout(x, 0.5, 1, training=False) is x
    k = dc.dropout_key(0, 1, 2, "gru")
    assert torch.equal(dc.dropout_mask((5, 5), 0.5, k), dc.dropout_mask((5, 5), 0.5, k))
    assert not torch.equal(dc.dropout_mask((5, 5), 0.5, k), dc.dropout_mask((5, 5), 0.5, dc.dropout_key(0, 1, 3, "gru")))


@pytest.mark.parametrize("rate", [0.1, 0.3, 0.5])
def test_dropout_preserves_expectation(rate):
    x = torch.full((10_000,), 2.0, dtype=dc.DTYPE)
    y = dc.dropout(x, rate, dc.dropout_key("stat", rate))
    assert abs(float(y.mean()) - 2.0) <= 0.02 * 2.0


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        dc.dropout_mask((2,), 1.0, 0)


def _params(v):
    return {"p": torch.tensor([v], dtype=dc.DTYPE)}


def test_adam_fixed_point_and_descent():
    p = _params(1.5)
    dc.adam_step(p, {"p": torch.zeros(1, dtype=dc.DTYPE)}, dc.AdamState(dc.AdamConfig(weight_decay=0.0)))
    assert float(p["p"]) == 1.5
    p = _params(1.0)
    dc.adam_step(p, {"p": torch.ones(1, dtype=dc.DTYPE)}, dc.AdamState())
    assert float(p["p"]) < 1.0


def test_adam_matches_hand_trace_on_quadratic():
    # f(p) = p^2, so g = 2p. Trace computed with plain floats.
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
        x = x - lr * (mh / (math.sqrt(vh) + eps) + wd * x)
    p = _params(1.0)
    state = dc.AdamState(dc.AdamConfig(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd))
    for _ in range(3):
        dc.adam_step(p, {"p": 2 * p["p"].clone()}, state)
    assert float(p["p"]) == pytest.approx(x, abs=1e-15)
    assert state.step == 3


def test_adam_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        dc.adam_step(_params(1.0), {"p": torch.zeros(2, dtype=dc.DTYPE)}, dc.AdamState())


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_checkpoint_round_trip_is_bitwise(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("ck") / "m.npz"
    params = {"w": torch.tensor(values, dtype=dc.DTYPE), "b.x": torch.tensor([[1 / 3]], dtype=dc.DTYPE)}
    dc.save_checkpoint(path, params, {"seed": 3})
    back, meta = dc.load_checkpoint(path)
    assert meta == {"seed": 3}
    assert all(torch.equal(back[k], params[k]) for k in params)
