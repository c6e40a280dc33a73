import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedmox import tensor as T
from fedmox.optim import OptimConfig
from fedmox.tensor import Parameter, ShapeError, Tensor


def fd_grad(f, x, h=1e-5):
    """Central differences of a scalar numpy function."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


# ---- forward examples


def test_conv1x1_all_ones():
    out = T.conv1x1(np.ones((2, 2, 2)), np.ones((1, 2)), np.zeros(1))
    assert out.shape == (1, 2, 2)
    assert np.array_equal(out.data, np.full((1, 2, 2), 2.0))


def test_softmax_uniform_pixel():
    p = T.softmax_channel(np.zeros((3, 1, 1))).data
    assert np.allclose(p[:, 0, 0], 1 / 3, atol=1e-15)


def test_cross_entropy_perfect_prediction():
    probs = np.zeros((4, 2, 2))
    probs[1] = 1.0
    loss = T.cross_entropy(probs, np.ones((2, 2), dtype=int))
    assert abs(loss.item()) < 1e-12


def test_cross_entropy_clamps_zero_probability():
    probs = np.zeros((2, 1))
    probs[0] = 1.0
    loss = T.cross_entropy(probs, np.array([1]))
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(-np.log(1e-12))


def test_cross_entropy_empty_weight_is_zero():
    p = Parameter(np.full((3, 4), 1 / 3), "p")
    loss = T.cross_entropy(p, np.zeros(4, dtype=int), weight=np.zeros(4))
    assert loss.item() == 0.0
    loss.backward()
    assert p.grad is None or not p.grad.any()


def test_conv1x1_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        T.conv1x1(np.ones((3, 2, 2)), np.ones((1, 2)))
    assert "(3, 2, 2)" in str(e.value) and "(1, 2)" in str(e.value)


def test_add_shape_error():
    with pytest.raises(ShapeError) as e:
        T.add(np.ones((2, 3)), np.ones((4, 3)))
    assert "(2, 3)" in str(e.value) and "(4, 3)" in str(e.value)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---- backward


def test_backward_sum_is_ones():
    p = Parameter(np.arange(6.0).reshape(2, 3), "p")
    T.sum(p).backward()
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_backward_mse_scalar():
    p = Parameter(3.0, "p")
    T.mse(p, 0.0).backward()
    assert p.grad == pytest.approx(6.0)


def test_backward_rejects_non_scalar():
    p = Parameter(np.ones(3), "p")
    with pytest.raises(ShapeError):
        T.scale(p, 2.0).backward()


def test_backward_twice_accumulates():
    p = Parameter(np.array([1.0, -2.0]), "p")
    loss = T.sum(T.mul(p, p))
    loss.backward()
    first = p.grad.copy()
    loss.backward()
    assert np.array_equal(p.grad, 2 * first)


def test_backward_linearity_exact():
    rng = np.random.default_rng(0)
    w = Parameter(rng.uniform(-1, 1, (3, 4)), "w")
    x = rng.uniform(-1, 1, (4, 5))

    def loss():
        return T.mean(T.relu(T.conv1x1(x, w)))

    w.zero_grad()
    loss().backward()
    g1 = w.grad.copy()
    w.zero_grad()
    T.scale(loss(), 4.0).backward()
    assert np.array_equal(w.grad, 4.0 * g1)


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2), "p")
    with T.no_grad():
        out = T.sum(T.mul(p, p))
    assert not out.requires_grad


def test_composite_matches_finite_differences(rng):
    x = rng.uniform(-1, 1, (4, 3, 5))
    w0 = rng.uniform(-1, 1, (6, 4))
    b0 = rng.uniform(-1, 1, 6)
    target = rng.integers(0, 6, (3, 5))

    def f(w):
        return T.cross_entropy(T.softmax_channel(T.conv1x1(x, w, b0)), target).item()

    w = Parameter(w0.copy(), "w")
    T.cross_entropy(T.softmax_channel(T.conv1x1(x, w, b0)), target).backward()
    num = fd_grad(f, w0.copy())
    assert np.allclose(w.grad, num, rtol=1e-6, atol=1e-9)


def test_gather_scatter_gradients(rng):
    a0 = rng.uniform(-1, 1, (3, 6))
    idx_a, idx_b = np.array([0, 2, 5]), np.array([1, 3, 4])
    c = rng.uniform(-1, 1, (3, 6))

    def build(a):
        A = T.as_tensor(a)
        parts = [T.scale(T.take_columns(A, idx_a), 2.0), T.mul(T.take_columns(A, idx_b), T.take_columns(A, idx_b))]
        out = T.scatter_columns(parts, [idx_a, idx_b], 6)
        return T.sum(T.mul(out, c))

    a = Parameter(a0.copy(), "a")
    build(a).backward()
    assert np.allclose(a.grad, fd_grad(lambda v: build(v).item(), a0.copy()), atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, min_side=1, max_side=4), elements=st.floats(-5, 5)),
)
def test_softmax_sums_to_one_and_finite(x):
    p = T.softmax_channel(x).data
    assert np.all(np.isfinite(p))
    assert np.allclose(p.sum(axis=0), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_broadcast_mul_gradient(c, h, w, seed):
    rng = np.random.default_rng(seed)
    a0 = rng.uniform(-1, 1, (c, h, w))
    b0 = rng.uniform(-1, 1, (1, h, w))
    a, b = Parameter(a0, "a"), Parameter(b0, "b")
    T.sum(T.mul(a, b)).backward()
    assert np.allclose(a.grad, np.broadcast_to(b0, a0.shape))
    assert np.allclose(b.grad, a0.sum(axis=0, keepdims=True))


def test_forward_deterministic(rng):
    x = rng.uniform(-1, 1, (4, 8, 8))
    w = rng.uniform(-1, 1, (3, 4))
    r1 = T.softmax_channel(T.conv1x1(x, w)).data
    r2 = T.softmax_channel(T.conv1x1(x, w)).data
    assert r1.tobytes() == r2.tobytes()


# ---- flop counter


def test_flop_counter_counts_linear_ops_only():
    with T.count_flops() as c:
        with T.flop_scope("a"):
            y = T.conv1x1(np.ones((4, 2, 3)), np.ones((5, 4)), np.zeros(5))
        T.relu(y)
        T.matmul(np.ones((2, 3)), np.ones((3, 7)))
    assert c.by_scope == {"a": 2 * 5 * 4 * 6, "untagged": 2 * 2 * 3 * 7}
    assert c.total == 240 + 84


# ---- optimizers


def test_sgd_plain_step():
    p = Parameter(np.array([1.0]), "p")
    p.grad = np.array([1.0])
    OptimConfig(learning_rate=0.1, momentum=0.0).build([p]).step()
    assert p.data[0] == pytest.approx(0.9)


@pytest.mark.parametrize("kind", ["sgd_momentum", "adamw"])
def test_zero_lr_is_identity(kind, rng):
    p = Parameter(rng.standard_normal((3, 2)), "p")
    before = p.data.tobytes()
    opt = OptimConfig(kind=kind, learning_rate=0.0, weight_decay=0.05).build([p])
    for _ in range(3):
        p.grad = rng.standard_normal((3, 2))
        opt.step()
    assert p.data.tobytes() == before


def test_step_missing_grad_names_parameter():
    p = Parameter(np.ones(2), "router.weight")
    with pytest.raises(ValueError, match="router.weight"):
        OptimConfig().build([p]).step()


def test_step_keeps_shapes(rng):
    ps = [Parameter(rng.standard_normal(s), f"p{i}") for i, s in enumerate([(2, 3), (4,), ()])]
    for kind in ("sgd_momentum", "adamw"):
        opt = OptimConfig(kind=kind, learning_rate=0.1).build(ps)
        for p in ps:
            p.grad = np.ones_like(p.data)
        opt.step()
        assert [p.shape for p in ps] == [(2, 3), (4,), ()]


def adamw_reference(p, grads, lr, b1, b2, eps, wd):
    """Scalar AdamW (decoupled decay), written out longhand."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * wd * p
        p = p - lr * mh / (vh**0.5 + eps)
    return p


def test_adamw_matches_reference():
    grads = [0.3, -1.2, 0.7, 0.05]
    cfg = OptimConfig(kind="adamw", learning_rate=1e-2, weight_decay=0.05)
    p = Parameter(np.array([0.8]), "p")
    opt = cfg.build([p])
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    ref = adamw_reference(0.8, grads, 1e-2, cfg.beta1, cfg.beta2, cfg.epsilon, 0.05)
    assert p.data[0] == pytest.approx(ref, abs=1e-15)


def test_adamw_first_step_sign():
    p = Parameter(np.array([0.0, 0.0]), "p")
    p.grad = np.array([2.0, -0.5])
    OptimConfig(kind="adamw", learning_rate=1e-3).build([p]).step()
    # first bias-corrected step is lr * sign(g) up to epsilon
    assert np.allclose(p.data, [-1e-3, 1e-3], atol=1e-9)


def test_sgd_momentum_matches_reference():
    p = Parameter(np.array([1.0]), "p")
    opt = OptimConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.01).build([p])
    ref, buf = 1.0, None
    for g in [0.5, -0.2, 0.1]:
        p.grad = np.array([g])
        opt.step()
        gg = g + 0.01 * ref
        buf = gg if buf is None else 0.9 * buf + gg
        ref -= 0.1 * buf
    assert p.data[0] == pytest.approx(ref, abs=1e-15)


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert t.size == int(np.prod(t.shape))
    t.zero_grad()
    assert t.grad.shape == t.shape
