"""Parameter storage and the layer primitives used by the model."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import (
    Tensor,
    attention_core,
    gelu,
    layer_norm,
    linear,
    reshape,
    rope,
    transpose,
)


class ParamStore:
    """Named parameters plus AdamW state (first/second moments, step count)."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()
        }

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, p in self.params.items():
            out.add(k, p.data)
        for k in self.m:
            out.m[k] = self.m[k].astype(dtype)
            out.v[k] = self.v[k].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        for k in self.m:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], step: int = 0):
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.data.shape}")
            p.data = arrays[k].astype(self.dtype)
        self.m = {k: arrays[f"adam.m/{k}"].astype(self.dtype) for k in self.params if f"adam.m/{k}" in arrays}
        self.v = {k: arrays[f"adam.v/{k}"].astype(self.dtype) for k in self.params if f"adam.v/{k}" in arrays}
        self.step = step


# --------------------------------------------------------------------------
# Initializers


def init_linear(store: ParamStore, name: str, d_in: int, d_out: int, rng, bias: bool = True, scale=1.0):
    store.add(f"{name}.w", rng.normal(0.0, scale / np.sqrt(d_in), (d_in, d_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(d_out))


def init_layer_norm(store: ParamStore, name: str, d: int):
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def init_attention(store: ParamStore, name: str, d: int, rng, d_kv: int | None = None):
    d_kv = d if d_kv is None else d_kv
    init_linear(store, f"{name}.q", d, d, rng, bias=False)
    init_linear(store, f"{name}.k", d_kv, d, rng, bias=False)
    init_linear(store, f"{name}.v", d_kv, d, rng, bias=False)
    init_linear(store, f"{name}.o", d, d, rng, bias=False)


def init_mlp(store: ParamStore, name: str, d: int, hidden: int, rng):
    init_linear(store, f"{name}.fc1", d, hidden, rng)
    init_linear(store, f"{name}.fc2", hidden, d, rng)


def init_block(store: ParamStore, name: str, d: int, mlp_ratio: int, rng, cross: bool = False):
    init_layer_norm(store, f"{name}.ln1", d)
    if cross:
        init_layer_norm(store, f"{name}.ln_kv", d)
    init_attention(store, f"{name}.attn", d, rng)
    init_layer_norm(store, f"{name}.ln2", d)
    init_mlp(store, f"{name}.mlp", d, d * mlp_ratio, rng)


# --------------------------------------------------------------------------
# Forward functions


def dense(store: ParamStore, name: str, x: Tensor) -> Tensor:
    b = store[f"{name}.b"] if f"{name}.b" in store else None
    return linear(x, store[f"{name}.w"], b)


def norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def mlp(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return dense(store, f"{name}.fc2", gelu(dense(store, f"{name}.fc1", x)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, d = x.shape
    return transpose(reshape(x, (*lead, length, heads, d // heads)), (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = len(lead)
    x = transpose(x, (*range(n), n + 1, n, n + 2))
    return reshape(x, (*lead, length, heads * dh))


def causal_mask(lq: int, lk: int) -> np.ndarray:
    return np.where(np.arange(lk)[None, :] > np.arange(lq)[:, None], -1e30, 0.0)


def multi_head_attention(
    store: ParamStore,
    name: str,
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    heads: int,
    causal: bool = False,
    key_mask: np.ndarray | None = None,
    rope_tables: tuple | None = None,
) -> Tensor:
    """Scaled dot-product attention with per-head projections and an output projection.

    q_in: (..., Lq, d); k_in, v_in: (..., Lk, d_kv).  ``key_mask`` is a 0/1
    array of shape (..., Lk); zeros are excluded from every softmax.
    ``rope_tables`` = (cos_q, sin_q, cos_k, sin_k), each (..., L, d_head),
    applies rotary positions to queries and keys.
    """
    d = store[f"{name}.q.w"].shape[1]
    if d % heads:
        raise ValueError(f"d_model {d} not divisible by {heads} heads")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ValueError("keys and values must have the same length")
    q = _split_heads(dense(store, f"{name}.q", q_in), heads)
    k = _split_heads(dense(store, f"{name}.k", k_in), heads)
    v = _split_heads(dense(store, f"{name}.v", v_in), heads)
    if rope_tables is not None:
        cq, sq, ck, sk = rope_tables
        q = rope(q, cq, sq)
        k = rope(k, ck, sk)
    mask = None
    if key_mask is not None:
        # (..., Lk) -> (..., 1, 1, Lk), broadcast over heads and queries
        mask = np.where(key_mask, 0.0, -1e30)[..., None, None, :].astype(q.dtype)
    if causal:
        cm = causal_mask(q.shape[-2], k.shape[-2]).astype(q.dtype)
        mask = cm if mask is None else mask + cm
    return dense(store, f"{name}.o", _merge_heads(attention_core(q, k, v, mask)))


def rope_tables(positions: np.ndarray, d_head: int, base: float = 10000.0, dtype=np.float64):
    """cos/sin tables for positions of shape (..., L), returned as (..., 1, L, d_head)."""
    half = d_head // 2
    inv_freq = base ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    ang = np.expand_dims(np.concatenate([ang, ang], axis=-1), -3)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def self_block(store, name, x, heads, key_mask=None, rope_tables=None):
    h = norm(store, f"{name}.ln1", x)
    rt = None if rope_tables is None else (*rope_tables, *rope_tables)
    x = x + multi_head_attention(store, f"{name}.attn", h, h, h, heads, key_mask=key_mask, rope_tables=rt)
    return x + mlp(store, f"{name}.mlp", norm(store, f"{name}.ln2", x))


def cross_block(store, name, x, context, heads, key_mask=None):
    h = norm(store, f"{name}.ln1", x)
    c = norm(store, f"{name}.ln_kv", context)
    x = x + multi_head_attention(store, f"{name}.attn", h, c, c, heads, key_mask=key_mask)
    return x + mlp(store, f"{name}.mlp", norm(store, f"{name}.ln2", x))
