import numpy as np
import pytest
from scipy.special import softmax as sp_softmax

from midi2drum.tensor_nn import ParamStore, adamw_step, grad_check, grad_check_params, load_checkpoint, save_checkpoint
from midi2drum.tensor_nn import tensor as T
from midi2drum.tensor_nn.layers import (
    init_attention,
    multi_head_attention,
    rope_tables,
)

TOL = 1e-4
rng = np.random.default_rng(1234)


def weighted(op, shape_out=None):
    """Scalar loss sum(op(x) * W) with a fixed random W, so every output element matters."""
    cache = {}

    def f(x):
        y = op(x)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(7).normal(size=y.shape)
        return T.tsum(T.mul(y, cache["w"]))

    return f


def x_of(*shape, positive=False):
    a = rng.normal(size=shape)
    return np.abs(a) + 0.5 if positive else a


W34 = rng.normal(size=(4, 3))
B3 = rng.normal(size=3)
KW = rng.normal(size=(3, 4, 2))
G4, BETA4 = rng.normal(size=4), rng.normal(size=4)
COS, SIN = rope_tables(np.arange(5), 4)
COS, SIN = COS[0], SIN[0]
K = rng.normal(size=(2, 6, 4))
V = rng.normal(size=(2, 6, 4))
MASK = np.where(rng.random((2, 5, 6)) < 0.3, -1e30, 0.0)
MASK[..., 0] = 0.0
TABLE_IDS = np.array([[0, 2, 2], [1, 0, 3]])
TGT = rng.normal(size=(2, 5, 3))
X254 = rng.normal(size=(2, 5, 4))
X34 = rng.normal(size=(3, 4))
X64 = rng.normal(size=(6, 4))
ROWMASK = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0]])

PRIMITIVES = {
    "add": (lambda x: T.add(x, T.Tensor(B3)), (4, 3)),
    "add_broadcast": (lambda x: T.add(T.Tensor(W34), x), (3,)),
    "sub": (lambda x: x - T.Tensor(W34), (4, 3)),
    "neg": (T.neg, (4, 3)),
    "mul": (lambda x: T.mul(x, x), (4, 3)),
    "reciprocal": (T.reciprocal, None),
    "div": (lambda x: T.Tensor(W34) / x, None),
    "exp": (T.exp, (4, 3)),
    "log": (T.log, None),
    "tanh": (T.tanh, (4, 3)),
    "square": (T.square, (4, 3)),
    "gelu": (T.gelu, (4, 3)),
    "sum_axis": (lambda x: T.tsum(x, axis=0, keepdims=True), (4, 3)),
    "mean": (lambda x: T.mean(x, axis=-1), (4, 3)),
    "reshape": (lambda x: T.reshape(x, (3, 4)), (4, 3)),
    "transpose": (lambda x: T.transpose(x, (1, 0, 2)), (2, 3, 4)),
    "swapaxes": (lambda x: T.swapaxes(x, 0, 2), (2, 3, 4)),
    "index_slice": (lambda x: T.index(x, (slice(1, 3), 0)), (4, 3)),
    "index_advanced": (lambda x: T.index(x, np.array([0, 2, 2, 3])), (4, 3)),
    "concat": (lambda x: T.concat([x, T.mul(x, x)], axis=1), (4, 3)),
    "stack": (lambda x: T.stack([x, T.exp(x)], axis=1), (4, 3)),
    "pad_rows": (lambda x: T.pad_rows(x, 2, 1), (4, 3)),
    "embedding": (lambda x: T.embedding(x, TABLE_IDS), (4, 3)),
    "matmul_left": (lambda x: T.matmul(x, T.Tensor(W34)), (2, 5, 4)),
    "matmul_right": (lambda x: T.matmul(T.Tensor(X254), x), (4, 3)),
    "matmul_batched": (lambda x: T.matmul(x, T.Tensor(K.transpose(0, 2, 1))), (2, 5, 4)),
    "linear": (lambda x: T.linear(x, T.Tensor(W34), T.Tensor(B3)), (5, 4)),
    "softmax": (lambda x: T.softmax(x, axis=-1), (4, 3)),
    "layer_norm_x": (lambda x: T.layer_norm(x, T.Tensor(G4), T.Tensor(BETA4)), (3, 4)),
    "layer_norm_gamma": (lambda g: T.layer_norm(T.Tensor(X34), g, T.Tensor(BETA4)), (4,)),
    "attention_q": (lambda q: T.attention_core(q, T.Tensor(K), T.Tensor(V), MASK), (2, 5, 4)),
    "attention_k": (lambda k: T.attention_core(T.Tensor(K[:, :5]), k, T.Tensor(V)), (2, 6, 4)),
    "attention_v": (lambda v: T.attention_core(T.Tensor(K[:, :5]), T.Tensor(K), v, MASK), (2, 6, 4)),
    "rope": (lambda x: T.rope(x, COS, SIN), (5, 4)),
    "conv1d_x": (lambda x: T.conv1d(x, T.Tensor(KW), T.Tensor(B3[:2])), (2, 6, 4)),
    "conv1d_w": (lambda w: T.conv1d(T.Tensor(X64), w), (3, 4, 2)),
    "masked_mse": (lambda p: T.masked_mse(p, TGT, ROWMASK), (2, 5, 3)),
    "mse": (lambda p: T.masked_mse(p, TGT), (2, 5, 3)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    op, shape = PRIMITIVES[name]
    x = x_of(4, 3, positive=True) if shape is None else x_of(*shape)
    assert grad_check(weighted(op), x) <= TOL


def test_grad_check_detects_wrong_gradient():
    def bad(a):
        return T._make(np.sin(a.data), (a,), lambda g: (g * np.sin(a.data),))

    assert grad_check(weighted(bad), x_of(3, 2)) > 1e-2


def test_forward_values_against_reference_formulas():
    x = x_of(3, 5)
    np.testing.assert_allclose(T.softmax(T.Tensor(x)).data, sp_softmax(x, axis=-1), atol=1e-12)
    mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
    g, b = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(
        T.layer_norm(T.Tensor(x), T.Tensor(g), T.Tensor(b)).data, (x - mu) / np.sqrt(var + 1e-5) * g + b, atol=1e-12
    )
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, ref, atol=1e-12)


def test_conv1d_matches_loop():
    x, w = x_of(7, 3), x_of(5, 3, 2)
    out = T.conv1d(T.Tensor(x), T.Tensor(w)).data
    ref = np.zeros((7, 2))
    for n in range(7):
        for j in range(5):
            src = n + j - 2
            if 0 <= src < 7:
                ref[n] += x[src] @ w[j]
    np.testing.assert_allclose(out, ref, atol=1e-12)
    with pytest.raises(ValueError):
        T.conv1d(T.Tensor(x), T.Tensor(x_of(4, 3, 2)))


def test_attention_matches_explicit_loop_and_mask():
    q, k, v = x_of(4, 3), x_of(5, 3), x_of(5, 2)
    mask = np.zeros((4, 5))
    mask[:, 3:] = -1e30
    out = T.attention_core(T.Tensor(q), T.Tensor(k), T.Tensor(v), mask).data
    for i in range(4):
        s = np.array([q[i] @ k[j] / np.sqrt(3) for j in range(3)])
        p = np.exp(s - s.max())
        p /= p.sum()
        np.testing.assert_allclose(out[i], p @ v[:3], atol=1e-12)


def test_rope_preserves_norm_and_relative_position():
    x = x_of(6, 8)
    cos, sin = rope_tables(np.arange(6), 8)
    y = T.rope(T.Tensor(x), cos[0], sin[0]).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12)
    q = np.tile(x_of(1, 8), (6, 1))
    kq = T.rope(T.Tensor(q), cos[0], sin[0]).data
    # score depends only on the offset between positions
    assert np.isclose(kq[1] @ kq[3], kq[2] @ kq[4])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(T.Tensor(x_of(3, 2)), [3])


def test_backward_accumulates_through_shared_nodes():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    y = T.tsum(T.mul(x, x) + x)
    y.backward()
    assert x.grad.tolist() == [5.0]


def test_no_grad_builds_no_graph():
    x = T.Tensor(x_of(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad


def test_multi_head_attention_params_gradients():
    store = ParamStore()
    init_attention(store, "a", 8, np.random.default_rng(0))
    x = T.Tensor(x_of(2, 5, 8))
    ctx = T.Tensor(x_of(2, 7, 8))
    km = np.ones((2, 7))
    km[1, 4:] = 0
    w = x_of(2, 5, 8)
    tabs = rope_tables(np.arange(5), 4)
    tabs_k = rope_tables(np.arange(7), 4)

    def loss():
        y = multi_head_attention(store, "a", x, ctx, ctx, heads=2, key_mask=km, rope_tables=(*tabs, *tabs_k))
        return T.tsum(T.mul(y, w))

    assert max(grad_check_params(loss, store).values()) <= TOL


def test_key_mask_excludes_keys():
    store = ParamStore()
    init_attention(store, "a", 4, np.random.default_rng(0))
    x = T.Tensor(x_of(1, 3, 4))
    ctx = x_of(1, 5, 4)
    km = np.array([[1, 1, 1, 0, 0]])
    y1 = multi_head_attention(store, "a", x, T.Tensor(ctx), T.Tensor(ctx), 2, key_mask=km).data
    ctx2 = ctx.copy()
    ctx2[:, 3:] = 99.0
    y2 = multi_head_attention(store, "a", x, T.Tensor(ctx2), T.Tensor(ctx2), 2, key_mask=km).data
    np.testing.assert_allclose(y1, y2, atol=1e-12)


def adamw_reference(p, grads, lr, b1, b2, eps, wd):
    """Loop-form AdamW with decoupled decay."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    p = p.copy()
    for t, g in enumerate(grads, start=1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


def test_adamw_matches_reference():
    p0 = x_of(3, 2)
    grads = [x_of(3, 2) for _ in range(5)]
    store = ParamStore()
    store.add("p", p0)
    for g in grads:
        adamw_step(store, {"p": g}, lr=0.01, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.1)
    np.testing.assert_allclose(store["p"].data, adamw_reference(p0, grads, 0.01, 0.9, 0.99, 1e-8, 0.1), atol=1e-12)
    assert store.step == 5


def test_adamw_rejects_non_finite():
    store = ParamStore()
    store.add("p", np.zeros(2))
    with pytest.raises(FloatingPointError):
        adamw_step(store, {"p": np.array([np.nan, 0.0])}, lr=0.1)


def test_checkpoint_roundtrip_with_optimizer_state(tmp_path):
    store = ParamStore()
    store.add("w", x_of(3, 4))
    store.add("b", x_of(4))
    adamw_step(store, {"w": x_of(3, 4), "b": x_of(4)}, lr=0.1)
    path = tmp_path / "c.m2d"
    save_checkpoint(path, {**store.state_arrays(), "ids": np.arange(3)}, {"step": store.step})
    arrays, meta = load_checkpoint(path)
    assert meta == {"step": 1}
    other = ParamStore()
    other.add("w", np.zeros((3, 4)))
    other.add("b", np.zeros(4))
    other.load_arrays(arrays, meta["step"])
    for k, v in store.state_arrays().items():
        np.testing.assert_array_equal(other.state_arrays()[k], v)
    np.testing.assert_array_equal(arrays["ids"], np.arange(3))
    assert path.read_bytes()[:8] == b"M2DCKPT\x00"


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_float32_graph_stays_float32():
    x = T.Tensor(x_of(3, 4).astype(np.float32), requires_grad=True)
    y = T.tsum(T.gelu(T.softmax(x)))
    y.backward()
    assert y.data.dtype == np.float32 and x.grad.dtype == np.float32
