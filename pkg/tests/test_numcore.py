import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from numcore import (
    ConfigError,
    Ema,
    HandcraftError,
    NonFiniteError,
    OneCycleSchedule,
    Optimizer,
    OptimizerState,
    RangeError,
    ShapeError,
    Tensor,
    clip_grad_norm,
    concat,
    dct,
    dct_basis,
    dropout,
    gelu,
    grad_check,
    idct,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    norm,
    onecycle_lr,
    optimizer_step,
    parameter,
    selective_scan,
    sigmoid,
    silu,
    softmax,
    softplus,
    stack,
)


# --------------------------
# Tensor / autograd
# --------------------------
def test_broadcast_add_reduces_gradient_to_operand_shape():
    a = parameter(np.ones((2, 3)))
    b = parameter(np.arange(3.0))
    (a + b).sum().backward()
    assert_array_equal(a.grad, np.ones((2, 3)))
    assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_product_rule_and_reuse_accumulate():
    x = parameter([3.0])
    y = x * x + x
    y.sum().backward()
    assert_allclose(x.grad, [7.0])


def test_advanced_indexing_accumulates_repeated_rows():
    x = parameter(np.arange(3.0))
    x[np.array([0, 0, 1])].sum().backward()
    assert_array_equal(x.grad, [2.0, 1.0, 0.0])


def test_backward_needs_scalar_or_seed():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        (x * 2).backward()
    with pytest.raises(HandcraftError):
        Tensor([1.0]).backward()


def test_no_grad_builds_no_graph():
    x = parameter(np.ones(2))
    with no_grad():
        y = x * 3
    assert not y.requires_grad
    assert (x * 3).requires_grad


def test_concat_and_stack_split_gradients():
    a, b = parameter(np.ones((2, 2))), parameter(np.ones((1, 2)))
    (concat([a, b], axis=0) * Tensor([[1.0, 2.0]])).sum().backward()
    assert_array_equal(a.grad, [[1, 2], [1, 2]])
    assert_array_equal(b.grad, [[1, 2]])

    c, d = parameter([1.0, 2.0]), parameter([3.0, 4.0])
    (stack([c, d], axis=1) ** 2).sum().backward()
    assert_allclose(d.grad, [6.0, 8.0])


# --------------------------
# matmul / layer_norm
# --------------------------
def test_matmul_identity_and_zeros(rng):
    b = rng.normal(size=(3, 3))
    assert_array_equal(matmul(np.eye(3), b).data, b)
    assert_array_equal(matmul(np.zeros((2, 2)), rng.normal(size=(2, 2))).data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    assert_allclose(matmul(a, b).data, expected, atol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_layer_norm_examples(rng):
    gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert_allclose(layer_norm(Tensor([[5.0, 5.0]]), gain, bias).data, [[0.0, 0.0]])
    assert_allclose(layer_norm(Tensor([1.0, 3.0]), gain, bias).data, [-1.0, 1.0], atol=1e-4)

    x = rng.normal(size=4)
    mean = sum(x) / 4
    var = sum((v - mean) ** 2 for v in x) / 4
    expected = [(v - mean) / math.sqrt(var + 1e-5) for v in x]
    out = layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert_allclose(out, expected, atol=1e-12)


def test_layer_norm_rejects_bad_axis_and_affine():
    x = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), axis=-1)
    with pytest.raises(ShapeError):
        layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), axis=2)


def test_softmax_rows_sum_to_one_and_mask(rng):
    p = softmax(Tensor(rng.normal(size=(5, 7)))).data
    assert_allclose(p.sum(axis=-1), np.ones(5), atol=1e-12)
    mask = np.array([0.0, -np.inf, 0.0])
    q = softmax(Tensor([1.0, 50.0, 1.0]), mask=mask).data
    assert_allclose(q, [0.5, 0.0, 0.5])


def test_log_softmax_matches_logsumexp(rng):
    x = rng.normal(size=6)
    expected = x - np.log(np.exp(x).sum())
    assert_allclose(log_softmax(Tensor(x)).data, expected, atol=1e-12)


@pytest.mark.parametrize("op", [sigmoid, softplus, silu, gelu, lambda t: t.tanh(), lambda t: t.exp()])
def test_elementwise_gradients(op, rng):
    x = parameter(rng.uniform(-1, 1, size=(3, 4)))
    assert grad_check(lambda: (op(x) ** 2).sum(), [x]) < 1e-5


def test_composite_gradients(rng):
    x = parameter(rng.uniform(-1, 1, size=(2, 3, 4)))
    w = parameter(rng.uniform(-1, 1, size=(4, 5)))
    gain, bias = parameter(rng.uniform(0.5, 1.5, size=5)), parameter(rng.uniform(-1, 1, size=5))
    target = Tensor(rng.normal(size=(2, 3, 5)))

    def f():
        h = layer_norm(matmul(x, w), gain, bias)
        return (softmax(h, axis=1) * target).sum() + norm(h, axis=-1).mean() + ((x * x + 1.0).sqrt() / 3.0).sum()

    assert grad_check(f, [x, w, gain, bias]) < 1e-3


def test_grad_check_quadratic():
    x = parameter([1.0, 2.0])
    err = grad_check(lambda: (x * x).sum(), [x])
    assert err < 1e-6
    assert_array_equal(x.grad, [0.0, 0.0])
    (x * x).sum().backward()
    assert_allclose(x.grad, [2.0, 4.0])


def test_norm_gradient_at_zero_is_zero():
    x = parameter(np.zeros((1, 3)))
    norm(x, axis=-1).sum().backward()
    assert_array_equal(x.grad, np.zeros((1, 3)))


def test_dropout_modes(rng):
    x = Tensor(np.ones((200, 50)))
    assert dropout(x, 0.2, None, training=False) is x
    with pytest.raises(ConfigError):
        dropout(x, 0.2, None, training=True)
    out = dropout(x, 0.2, rng, training=True).data
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert abs(out.mean() - 1.0) < 0.05


# --------------------------
# selective scan
# --------------------------
def _scan_inputs(rng, batch=1, length=5, channels=2, state=3):
    return (Tensor(rng.normal(size=(batch, length, channels))),
            Tensor(rng.uniform(0.1, 0.5, size=(batch, length, channels))),
            Tensor(-rng.uniform(0.5, 2.0, size=(channels, state))),
            Tensor(rng.normal(size=(batch, length, state))),
            Tensor(rng.normal(size=(batch, length, state))),
            Tensor(rng.normal(size=channels)))


def test_selective_scan_zero_input_gives_zero(rng):
    u, dt, a, b, c, _ = _scan_inputs(rng)
    y = selective_scan(Tensor(np.zeros(u.shape)), dt, a, b, c, Tensor(np.zeros(2)))
    assert_array_equal(y.data, np.zeros(u.shape))


def test_selective_scan_single_step_by_hand():
    u, dt, a, b, c, d = (Tensor(np.full((1, 1, 1), 0.7)), Tensor(np.full((1, 1, 1), 0.3)),
                         Tensor([[-1.2]]), Tensor(np.full((1, 1, 1), 0.5)),
                         Tensor(np.full((1, 1, 1), 2.0)), Tensor([0.4]))
    y = selective_scan(u, dt, a, b, c, d).data
    assert_allclose(y, [[[2.0 * (0.3 * 0.5 * 0.7) + 0.4 * 0.7]]], atol=1e-15)


def test_selective_scan_is_causal(rng):
    u, dt, a, b, c, d = _scan_inputs(rng)
    base = selective_scan(u, dt, a, b, c, d).data
    changed = u.data.copy()
    changed[0, 3] += 1.0
    out = selective_scan(Tensor(changed), dt, a, b, c, d).data
    assert_array_equal(out[0, :3], base[0, :3])
    assert np.all(out[0, 3:] != base[0, 3:])


def test_selective_scan_gradient(rng):
    tensors = [parameter(t.data) for t in _scan_inputs(rng, batch=2, length=4)]
    assert grad_check(lambda: (selective_scan(*tensors) ** 2).sum(), tensors) < 1e-3


# --------------------------
# DCT
# --------------------------
@pytest.mark.parametrize("n", [2, 8, 16, 32])
def test_dct_roundtrip_and_norm(n, rng):
    x = rng.normal(size=(n, 5))
    coeffs = dct(x).data
    assert_allclose(idct(coeffs).data, x, atol=1e-9)
    assert_allclose(np.linalg.norm(coeffs, axis=0), np.linalg.norm(x, axis=0), atol=1e-9)
    basis = dct_basis(n)
    assert_allclose(basis.forward_matrix @ basis.inverse_matrix, np.eye(n), atol=1e-10)
    assert_allclose(basis.forward_matrix[0], np.full(n, basis.forward_matrix[0, 0]), atol=1e-15)


def test_dct_of_constant_has_only_dc():
    coeffs = dct(np.full((16, 3), 2.5)).data
    assert np.all(np.abs(coeffs[1:]) < 1e-12)
    assert_allclose(coeffs[0], np.full(3, 2.5 * 4.0))


def test_dct_impulse_matches_closed_form():
    n, t = 8, 3
    impulse = np.zeros((n, 1))
    impulse[t] = 1.0
    k = np.arange(n)
    expected = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * t + 1) * k / (2 * n))
    expected[0] = np.sqrt(1.0 / n)
    assert_allclose(dct(impulse).data[:, 0], expected, atol=1e-12)


def test_dct_basis_mismatch():
    with pytest.raises(ShapeError):
        dct(np.ones((8, 2)), basis=dct_basis(4))


def test_dct_gradient(rng):
    x = parameter(rng.normal(size=(2, 6, 3)))
    w = Tensor(rng.normal(size=(2, 6, 3)))
    assert grad_check(lambda: (idct(dct(x) * w) ** 2).sum(), [x]) < 1e-3


# --------------------------
# optimizers
# --------------------------
@pytest.mark.parametrize("kind", ["adam", "radam"])
def test_zero_grad_no_decay_leaves_params(kind):
    state = OptimizerState(kind=kind)
    params = {"w": np.array([1.0, -2.0])}
    for _ in range(6):
        params = optimizer_step(state, params, {"w": np.zeros(2)}, lr=0.1)
    assert_array_equal(params["w"], [1.0, -2.0])
    assert state.step_count == 6


@pytest.mark.parametrize("kind", ["adam", "radam"])
def test_lr_zero_is_identity(kind, rng):
    state = OptimizerState(kind=kind)
    w = rng.normal(size=3)
    out = optimizer_step(state, {"w": w}, {"w": rng.normal(size=3)}, lr=0.0)
    assert_array_equal(out["w"], w)


def test_adam_first_step_by_hand():
    out = optimizer_step(OptimizerState(kind="adam"), {"x": np.array(0.0)}, {"x": np.array(1.0)}, lr=0.1)
    assert out["x"] == pytest.approx(-0.1, abs=1e-6)


def test_radam_matches_reference_pseudocode():
    grads = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8

    theta, m, v = 1.0, 0.0, 0.0
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    expected = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
        if rho_t > 4.0:
            l_t = math.sqrt((1 - b2 ** t) / v)
            r_t = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
            theta = theta - lr * m_hat * r_t * l_t
        else:
            theta = theta - lr * m_hat
        expected.append(theta)

    state = OptimizerState(kind="radam", eps=eps)
    params = {"x": np.array(1.0)}
    for g, want in zip(grads, expected):
        params = optimizer_step(state, params, {"x": np.array(g)}, lr)
        assert float(params["x"]) == pytest.approx(want, rel=1e-7)


def test_decoupled_weight_decay():
    state = OptimizerState(kind="adam", weight_decay=0.5)
    out = optimizer_step(state, {"w": np.array([2.0])}, {"w": np.array([0.0])}, lr=0.1)
    assert_allclose(out["w"], [2.0 - 0.1 * 0.5 * 2.0])


def test_optimizer_rejects_bad_gradients():
    state = OptimizerState()
    with pytest.raises(NonFiniteError):
        optimizer_step(state, {"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, lr=0.1)
    with pytest.raises(ShapeError):
        optimizer_step(state, {"w": np.zeros(2)}, {"w": np.zeros(3)}, lr=0.1)
    with pytest.raises(ConfigError):
        OptimizerState(kind="sgd")


def test_optimizer_descends_a_quadratic():
    w = parameter([3.0, -2.0])
    opt = Optimizer({"w": w}, kind="radam")
    for _ in range(300):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step(0.05)
    assert np.all(np.abs(w.data) < 0.2)


def test_clip_grad_norm_and_ema():
    a, b = parameter([0.0, 0.0]), parameter([0.0])
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])

    ema = Ema({"a": a}, decay=0.5)
    a.data = np.array([2.0, 4.0])
    ema.update({"a": a})
    ema.copy_to({"a": a})
    assert_allclose(a.data, [1.0, 2.0])
    with pytest.raises(ConfigError):
        Ema({"a": a}, decay=1.0)


# --------------------------
# OneCycle
# --------------------------
def test_onecycle_endpoints():
    sched = OneCycleSchedule(peak_lr=1e-2, total_steps=100, warmup_ratio=0.3)
    warm = sched.warmup_steps
    assert warm == math.ceil(0.3 * 100)
    assert onecycle_lr(sched, 0) == pytest.approx(1e-2 / 25, rel=1e-12)
    assert onecycle_lr(sched, warm) == 1e-2
    assert onecycle_lr(sched, 100) == pytest.approx(1e-2 / 1e4, abs=1e-12)
    assert onecycle_lr(sched, 0) < 1e-2 and onecycle_lr(sched, 100) < 1e-2


def test_onecycle_is_monotone_on_each_segment():
    sched = OneCycleSchedule(peak_lr=1e-3, total_steps=50, warmup_ratio=0.1)
    lrs = [onecycle_lr(sched, s) for s in range(51)]
    warm = sched.warmup_steps
    assert all(x <= y for x, y in zip(lrs[:warm], lrs[1:warm + 1]))
    assert all(x >= y for x, y in zip(lrs[warm:], lrs[warm + 1:]))
    assert abs(lrs[warm + 1] - lrs[warm]) < 1e-4


def test_onecycle_errors():
    sched = OneCycleSchedule(peak_lr=1.0, total_steps=10)
    with pytest.raises(RangeError):
        onecycle_lr(sched, 11)
    with pytest.raises(RangeError):
        onecycle_lr(sched, -1)
    with pytest.raises(ConfigError):
        OneCycleSchedule(peak_lr=1.0, total_steps=10, warmup_ratio=1.0)
    with pytest.raises(ConfigError):
        OneCycleSchedule(peak_lr=1.0, total_steps=1)
    with pytest.raises(ConfigError, match="no annealing step"):
        OneCycleSchedule(peak_lr=1.0, total_steps=10, warmup_ratio=0.95)
    assert OneCycleSchedule(peak_lr=1.0, total_steps=10, warmup_ratio=0.85).warmup_steps == 9
