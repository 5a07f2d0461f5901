"""Kernel math: frozen oracles, backward correctness, optimizer behavior."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalncd import autodiff as ad
from causalncd import optim
from causalncd.errors import DegenerateInputError, ParameterError, UsageError


# ---------------------------------------------------------------------------
# frozen scalar oracles
# ---------------------------------------------------------------------------

def test_cosine_sim_known_value():
    assert ad.cosine_sim([1.0, 1.0], [1.0, 0.0]) == pytest.approx(
        0.7071067811865475, abs=1e-12)


def test_cosine_sim_bounds_and_errors():
    assert ad.cosine_sim([2.0, 0.0], [5.0, 0.0]) == pytest.approx(1.0)
    assert ad.cosine_sim([1.0, 0.0], [-3.0, 0.0]) == pytest.approx(-1.0)
    with pytest.raises(DegenerateInputError):
        ad.cosine_sim([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(UsageError):
        ad.cosine_sim([1.0, 0.0], [1.0, 0.0, 0.0])


def test_softmax_sharp_temperature_value():
    out = ad.softmax(np.array([0.1, 0.0]), temperature=0.06)
    # hand-computed: e^0 and e^(-0.1/0.06) normalized
    z = math.exp(-0.1 / 0.06)
    assert out[0] == pytest.approx(1.0 / (1.0 + z), abs=1e-12)
    assert out[0] == pytest.approx(0.841131, abs=1e-6)
    assert out[1] == pytest.approx(0.158869, abs=1e-6)


def test_softmax_extreme_magnitudes_stable():
    out = ad.softmax(np.array([1e3, -1e3, 500.0]))
    assert np.all(np.isfinite(out))
    assert abs(out.sum() - 1.0) < 1e-9


def test_softmax_rejects_bad_temperature():
    for t in (0.0, -1.0, float("nan")):
        with pytest.raises(ParameterError):
            ad.softmax(np.array([1.0, 2.0]), temperature=t)


def test_leaky_relu_values():
    assert ad.leaky_relu(-2.0, 0.01) == pytest.approx(-0.02, abs=1e-15)
    assert ad.leaky_relu(3.0, 0.01) == pytest.approx(3.0)
    assert ad.leaky_relu(0.0, 0.01) == 0.0
    with pytest.raises(ParameterError):
        ad.leaky_relu(1.0, 0.0)
    with pytest.raises(ParameterError):
        ad.leaky_relu(1.0, 1.5)


@given(st.integers(2, 8), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_shift_invariance(dim, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=dim) * 10
    a = ad.softmax(x)
    b = ad.softmax(x + 123.456)
    assert np.allclose(a, b, atol=1e-12)
    assert abs(a.sum() - 1.0) < 1e-9
    assert np.all(a > 0)


@given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_cosine_sim_symmetry_and_range(dim, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=dim)
    b = rng.normal(size=dim)
    s = ad.cosine_sim(a, b)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12
    assert s == pytest.approx(ad.cosine_sim(b, a), abs=1e-12)
    assert ad.cosine_sim(a, 3.0 * a) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# reverse-mode backward
# ---------------------------------------------------------------------------

def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_constant_loss_zero_gradients():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    loss = ad.Tensor(5.0, requires_grad=True) * 1.0
    grads = ad.gradients(loss.sum(), [x])
    assert np.all(grads[0] == 0.0)


def test_diamond_graph_accumulates():
    # f(x) = x*x + x  ->  f'(x) = 2x + 1
    x = ad.Tensor(3.0, requires_grad=True)
    y = x * x + x
    g = ad.gradients(y, [x])[0]
    assert g == pytest.approx(7.0)


def test_gather_rows_backward():
    x = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = x.gather_rows([1, 0, 1]).sum()
    g = ad.gradients(out, [x])[0]
    assert np.array_equal(g, np.array([[0, 1], [1, 0], [0, 1.0]]))


def test_grad_check_polynomial_tight():
    w = ad.Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True, name="w")

    def loss():
        return (w * w * w - 2.0 * w).sum()

    reports = ad.grad_check(loss, [w], h=1e-5)
    assert ad.max_rel_error(reports) < 1e-9
    assert len(reports) == 3
    assert reports[0].parameter == "w[0]"


def test_grad_check_composite_ops():
    rng = np.random.default_rng(0)
    a = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="a")
    b = ad.Tensor(rng.normal(size=(3, 2)), requires_grad=True, name="b")

    def loss():
        h = (a @ b).tanh()
        s = ad.softmax(h, temperature=0.5, axis=1)
        return (s * s).sum() + h.sigmoid().mean()

    reports = ad.grad_check(loss, [a, b], h=1e-5)
    assert ad.max_rel_error(reports) < 1e-7


def test_grad_check_cosine_matrix():
    rng = np.random.default_rng(1)
    z = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="z")
    c = ad.Tensor(rng.normal(size=(2, 4)), requires_grad=True, name="c")

    def loss():
        return ad.cosine_matrix(z, c).sum()

    assert ad.max_rel_error(ad.grad_check(loss, [z, c], h=1e-5)) < 1e-7


def test_no_grad_blocks_graph():
    x = ad.Tensor(2.0, requires_grad=True)
    with ad.no_grad():
        y = x * x
    assert not y.requires_grad
    assert ad.gradients((x * 1.0), [x])[0] == pytest.approx(1.0)


def test_unbroadcast_row_vector():
    x = ad.Tensor(np.ones((4, 3)), requires_grad=True)
    b = ad.Tensor(np.ones((1, 3)), requires_grad=True)
    g = ad.gradients(((x + b) * 2.0).sum(), [x, b])
    assert np.all(g[0] == 2.0)
    assert np.all(g[1] == 8.0)  # summed over the broadcast axis


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_optim_zero_grad_zero_decay_is_identity():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    before = p.data.copy()
    state = optim.init_optim([p], lr=1e-3)
    optim.optim_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.data, before)


def test_optim_converges_on_quadratic():
    p = ad.Tensor(np.array([5.0, -3.0]), requires_grad=True)
    state = optim.init_optim([p], lr=0.1)
    for _ in range(500):
        g = ad.gradients((p * p).sum(), [p])
        optim.optim_step([p], g, state)
    assert np.all(np.abs(p.data) < 1e-3)


def test_optim_weight_decay_shrinks_params():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    state = optim.init_optim([p], lr=0.01, weight_decay=0.1)
    optim.optim_step([p], [np.zeros(1)], state)
    assert p.data[0] == pytest.approx(1.0 - 0.01 * 0.1)


def test_optim_shape_mismatch_raises():
    p = ad.Tensor(np.ones(3), requires_grad=True)
    state = optim.init_optim([p], lr=0.1)
    with pytest.raises(UsageError):
        optim.optim_step([p], [np.ones(2)], state)


def test_lr_schedule_halving_with_floor():
    assert optim.decayed_lr(1e-3, 0) == pytest.approx(1e-3)
    assert optim.decayed_lr(1e-3, 4) == pytest.approx(1e-3)
    assert optim.decayed_lr(1e-3, 5) == pytest.approx(5e-4)
    assert optim.decayed_lr(1e-3, 10) == pytest.approx(2.5e-4)
    # deep into the schedule the floor takes over
    assert optim.decayed_lr(1e-3, 500) == pytest.approx(1e-5)
    with pytest.raises(ParameterError):
        optim.decayed_lr(1e-3, 3, decay_every=0)
