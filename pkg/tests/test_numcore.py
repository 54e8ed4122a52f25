import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from m4c.errors import DimensionError, ParseError, ValidationError
from m4c.numcore import (
    AdamState,
    Tensor,
    adam_step,
    check_gradients,
    clip_global_grad_norm,
    concat,
    gather_rows,
    gelu,
    global_grad_norm,
    layer_norm,
    linear,
    load_checkpoint,
    matmul,
    save_checkpoint,
    sigmoid_bce_with_logits,
    softmax,
    where,
)

SEEDS = [0, 1, 2, 3, 4]


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# -- matmul --------------------------------------------------------------------

def test_matmul_identity_and_zeros():
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    out = matmul(Tensor(np.zeros((2, 4))), Tensor(np.random.default_rng(0).normal(size=(4, 5))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 5, 7), rand(rng, 7, 3)
    w = rng.standard_normal((5, 3))
    err = check_gradients(lambda p: (matmul(p[0], p[1]) * w).sum(), [a, b])
    assert err <= 1e-6


def test_batched_matmul_gradient_with_shared_weight():
    rng = np.random.default_rng(3)
    a, b = rand(rng, 2, 4, 3), rand(rng, 3, 5)
    w = rng.standard_normal((2, 4, 5))
    assert check_gradients(lambda p: (matmul(p[0], p[1]) * w).sum(), [a, b]) <= 1e-6


# -- softmax -------------------------------------------------------------------

def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == 1.0 and out[1] < 1e-300


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        softmax(Tensor(np.zeros((3, 0))))


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 6)
    w = rng.standard_normal(6)
    assert check_gradients(lambda p: (softmax(p[0]) * w).sum(), [x]) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_zero_gamma_gives_beta():
    b = np.arange(4.0)
    out = layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))


def test_layer_norm_moments():
    x = np.random.default_rng(1).normal(size=(4, 16)) * 5 + 2
    out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-9)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
    w = rng.standard_normal((3, 6))
    assert check_gradients(lambda p: (layer_norm(p[0], p[1], p[2]) * w).sum(), [x, g, b]) <= 1e-5


# -- sigmoid BCE ---------------------------------------------------------------

def test_bce_zero_logits_is_ln2():
    t = np.array([[0, 1, 1], [1, 0, 0]], dtype=float)
    loss = sigmoid_bce_with_logits(Tensor(np.zeros((2, 3))), t, np.ones((2, 3)))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-15)


def test_bce_fully_masked_is_zero():
    loss = sigmoid_bce_with_logits(Tensor(np.ones((2, 3))), np.ones((2, 3)), np.zeros((2, 3)))
    assert loss.item() == 0.0


def test_bce_rejects_soft_targets():
    with pytest.raises(ValidationError):
        sigmoid_bce_with_logits(Tensor(np.zeros(2)), np.array([0.5, 1.0]), np.ones(2))


def test_bce_finite_at_extremes():
    x = Tensor(np.array([-1e4, 1e4, -1e4, 1e4]), requires_grad=True)
    loss = sigmoid_bce_with_logits(x, np.array([0.0, 0.0, 1.0, 1.0]), np.ones(4))
    loss.backward()
    assert np.isfinite(loss.item()) and np.all(np.isfinite(x.grad))
    assert loss.item() == pytest.approx(2e4 / 4)


@pytest.mark.parametrize("seed", SEEDS)
def test_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 4, 8, scale=2.0)
    t = (rng.random((4, 8)) < 0.3).astype(float)
    m = (rng.random((4, 8)) < 0.8).astype(float)
    assert check_gradients(lambda p: sigmoid_bce_with_logits(p[0], t, m), [x]) <= 1e-6


# -- misc op gradients ---------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_composite_ops_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rand(rng, 2, 3, 4, scale=0.5), rand(rng, 5, 4, scale=0.5), rand(rng, 5, scale=0.5)
    table = rand(rng, 6, 5, scale=0.5)
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    cond = rng.random((2, 3, 5)) < 0.5
    wt = rng.standard_normal((2, 3, 10))

    def f(p):
        h = gelu(linear(p[0], p[1], p[2]))
        e = gather_rows(p[3], ids)
        mixed = where(cond, h, e * h)
        cat = concat([mixed, (h / (1.5 + e.square())).tanh()], axis=-1)
        return (cat * wt).mean() + cat[:, 1:, ::2].exp().mean() + cat.swapaxes(0, 1).reshape(3, -1).sum(axis=0).mean()

    assert check_gradients(f, [x, w, b, table]) <= 1e-5


# -- check_gradients itself ------------------------------------------------------

def test_check_gradients_sum_of_squares():
    x = Tensor(np.random.default_rng(7).normal(size=10), requires_grad=True)
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)
    # exact for quadratics up to roundoff, so a coarse step is safe
    assert check_gradients(lambda p: (p[0] * p[0]).sum(), [x], step=1e-3) <= 1e-8


def test_check_gradients_constant_function():
    x = Tensor(np.ones(3), requires_grad=True)
    assert check_gradients(lambda p: (p[0] * 0.0).sum() + 4.0, [x]) <= 1e-4


def test_check_gradients_catches_wrong_backward():
    x = Tensor(np.linspace(0.5, 2.0, 4), requires_grad=True)

    def bad_square(p):
        t = p[0]
        return Tensor._make(t.data ** 2, (t,), lambda g: (g * t.data,)).sum()

    assert check_gradients(bad_square, [x]) > 0.1


# -- Adam and clipping -----------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.arange(3.0), requires_grad=True)}
    state = AdamState()
    adam_step(p, {"w": np.zeros(3)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, np.arange(3.0))
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    lr, g = 1e-3, np.array([0.5, -2.0, 1e-3])
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    adam_step(p, {"w": g}, AdamState(), lr=lr)
    # t=1: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"].data, -lr * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(np.abs(p["w"].data), lr, rtol=1e-4)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(11)
        p = {"a": Tensor(rng.normal(size=(3, 3))), "b": Tensor(rng.normal(size=4))}
        s = AdamState()
        for _ in range(20):
            grads = {k: rng.normal(size=v.shape) for k, v in p.items()}
            adam_step(p, grads, s, 1e-2)
        return {k: v.data.copy() for k, v in p.items()}

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_clip_examples():
    small = {"g": np.array([0.06, 0.08])}
    assert clip_global_grad_norm(small, 0.25)["g"] is small["g"]
    out = clip_global_grad_norm({"g": np.array([3.0, 4.0])}, 0.25)
    np.testing.assert_allclose(out["g"], [0.15, 0.20], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)), arrays(np.float64, (2, 2), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-3, 10.0))
def test_clip_postcondition(a, b, max_norm):
    out = clip_global_grad_norm({"a": a, "b": b}, max_norm)
    assert global_grad_norm(out) <= max_norm + 1e-12 or global_grad_norm(out) <= max_norm * (1 + 1e-12)


# -- checkpoint ------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    params = {"w.one": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "scalar": np.array(np.pi),
              "weird": np.array([np.finfo(float).tiny, -0.0, 1e308])}
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()
    assert path.read_bytes()[:4] == b"M4C1"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(ParseError):
        load_checkpoint(path)
    save_checkpoint(path, {"x": np.ones(3)})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ParseError):
        load_checkpoint(path)
