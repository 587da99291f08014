"""Dual-input content encoder and the miniature diffusion transformer.

The DiT input sequence for one item is::

    [ t token | duration token | total-step token | z_t frames | x_ref frames ]

z_t and x_ref frames each go through the shared pre-process conv1d (applied
to each segment separately, zero padded at its edges).  Content features of
the target grid are aligned onto the z_t frames and those of the reference
grid onto the x_ref frames, then added.  Only the z_t positions are read
out.  When x_ref is blanked for guidance it is replaced by a learned null
sequence, both here and as the encoder's cross-attention context, and the
reference content is not added.

Batches are right-padded; ``key_mask`` keeps padded positions out of every
softmax and the loss is masked the same way, so a batched forward agrees
with the per-item forward.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..align import AlignmentSpec, alignment_indices
from ..midi_core import N_COLUMNS, BinarizedGrid
from ..signals import FRAME_SECONDS, LATENT_DIM, frames_for_duration
from ..tensor_nn import layers as L
from ..tensor_nn.tensor import (
    Tensor,
    add,
    concat,
    conv1d,
    gather,
    gelu,
    index,
    masked_mse,
    mul,
    no_grad,
    pad_rows,
    stack,
)
from . import diffusion

N_GLOBAL = 3
NULL_LENGTH = 1
MAX_DURATION = 30.0
MAX_TOTAL_STEPS = 1024.0


@dataclass(frozen=True)
class DiTConfig:
    layers: int = 24
    d_model: int = 1536
    heads: int = 24
    mlp_ratio: int = 4
    content_self_layers: int = 2
    content_cross_layers: int = 2
    max_steps: int = 256
    conv_width: int = 3
    n_features: int = 64

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"{k} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if (self.d_model // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary positions")

    @property
    def content_encoder_layers(self) -> int:
        return self.content_self_layers + self.content_cross_layers


PRESETS = {
    "full": DiTConfig(),
    "toy": DiTConfig(layers=4, d_model=64, heads=4, mlp_ratio=4, content_self_layers=2, content_cross_layers=2),
    "tiny": DiTConfig(
        layers=1, d_model=8, heads=2, mlp_ratio=2, content_self_layers=1, content_cross_layers=1,
        max_steps=16, n_features=8,
    ),
}


@dataclass
class ConditionBundle:
    """Condition set for one item.  ``x_ref=None`` marks the blanked (null) reference."""

    c_tgt: BinarizedGrid
    c_ref: BinarizedGrid
    x_ref: np.ndarray | None
    duration_seconds: float
    total_steps: int
    t: float = 0.0

    def __post_init__(self):
        if self.total_steps != self.c_tgt.n_steps:
            raise ValueError(f"total_steps {self.total_steps} != target grid rows {self.c_tgt.n_steps}")
        if not self.duration_seconds > 0:
            raise ValueError("duration_seconds must be positive")
        if self.x_ref is not None and len(self.x_ref) == 0:
            raise ValueError("x_ref must be non-empty (use None for the null reference)")

    @classmethod
    def from_grids(cls, c_tgt: BinarizedGrid, c_ref: BinarizedGrid, x_ref, t: float = 0.0):
        return cls(c_tgt, c_ref, x_ref, c_tgt.duration, c_tgt.n_steps, t)

    def blanked(self) -> "ConditionBundle":
        return replace(self, x_ref=None)

    def at(self, t: float) -> "ConditionBundle":
        return replace(self, t=t)


def sinusoidal_features(values: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = (scale * values)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def init_params(config: DiTConfig, seed: int = 0, dtype=np.float64) -> L.ParamStore:
    rng = np.random.default_rng(seed)
    d, r = config.d_model, config.mlp_ratio
    store = L.ParamStore(dtype)
    # content encoder
    L.init_linear(store, "enc.in", N_COLUMNS, d, rng)
    store.add("enc.pos", rng.normal(0.0, 0.02, (config.max_steps, d)))
    L.init_linear(store, "enc.ref", LATENT_DIM, d, rng)
    for i in range(config.content_self_layers):
        L.init_block(store, f"enc.self{i}", d, r, rng)
    for i in range(config.content_cross_layers):
        L.init_block(store, f"enc.cross{i}", d, r, rng, cross=True)
    L.init_layer_norm(store, "enc.out", d)
    store.add("null_ref", rng.normal(0.0, 0.02, (NULL_LENGTH, LATENT_DIM)))
    # global conditioners
    f = config.n_features
    L.init_linear(store, "cond.t1", f, d, rng)
    L.init_linear(store, "cond.t2", d, d, rng)
    L.init_linear(store, "cond.dur", f, d, rng)
    L.init_linear(store, "cond.steps", f, d, rng)
    # DiT
    store.add("dit.pre.w", rng.normal(0.0, 1.0 / np.sqrt(LATENT_DIM * config.conv_width),
                                      (config.conv_width, LATENT_DIM, d)))
    store.add("dit.pre.b", np.zeros(d))
    for i in range(config.layers):
        L.init_block(store, f"dit.block{i}", d, r, rng)
    L.init_layer_norm(store, "dit.out_ln", d)
    L.init_linear(store, "dit.post", d, LATENT_DIM, rng, scale=0.1)
    return store


@dataclass
class Batch:
    """Right-padded arrays for a batch of items."""

    z: np.ndarray          # (B, N, 64)
    z_mask: np.ndarray     # (B, N)
    x_ref: np.ndarray      # (B, R, 64), zeros on null rows
    null_mask: np.ndarray  # (B, R), 1 where the learned null row goes
    ref_mask: np.ndarray   # (B, R), valid reference or null rows
    c_tgt: np.ndarray      # (B, T, 10)
    c_ref: np.ndarray      # (B, T, 10)
    tgt_idx: np.ndarray    # (B, N) aligned step per z frame
    ref_idx: np.ndarray    # (B, R) aligned step per reference frame
    ref_content: np.ndarray  # (B, R), 1 where reference content is added
    t_feat: np.ndarray     # (B, F)
    dur_feat: np.ndarray   # (B, F)
    steps_feat: np.ndarray  # (B, F)
    positions: np.ndarray  # (B, 3 + N + R) rotary positions

    @property
    def size(self) -> int:
        return self.z.shape[0]


def check_timeline(n_frames: int, bundle: ConditionBundle) -> None:
    grid = bundle.c_tgt
    if abs(grid.duration - bundle.duration_seconds) > 1e-6 * max(1.0, grid.duration):
        raise ValueError(
            f"timeline mismatch: grid spans {grid.duration:.6f}s, bundle says {bundle.duration_seconds:.6f}s"
        )
    expected = frames_for_duration(bundle.duration_seconds)
    if n_frames != expected:
        raise ValueError(f"timeline mismatch: z_t has {n_frames} frames, segment needs {expected}")


def collate(z_list, bundles, n_features: int, dtype=np.float64, latent_shift: float = 0.0,
            latent_scale: float = 1.0) -> Batch:
    """Pad a batch.  ``z_list`` is in model units; references are mapped with the latent shift/scale."""
    b = len(z_list)
    if b == 0 or len(bundles) != b:
        raise ValueError("need one bundle per latent")
    T = bundles[0].c_tgt.n_steps
    for z, bd in zip(z_list, bundles):
        if bd.c_tgt.n_steps != T or bd.c_ref.n_steps != T:
            raise ValueError("all grids in a batch must have the same number of steps")
        if not 0.0 <= bd.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {bd.t}")
        check_timeline(len(z), bd)
    n_max = max(len(z) for z in z_list)
    r_lens = [NULL_LENGTH if bd.x_ref is None else len(bd.x_ref) for bd in bundles]
    r_max = max(r_lens)

    z = np.zeros((b, n_max, LATENT_DIM), dtype)
    z_mask = np.zeros((b, n_max), dtype)
    x_ref = np.zeros((b, r_max, LATENT_DIM), dtype)
    null_mask = np.zeros((b, r_max), dtype)
    ref_mask = np.zeros((b, r_max), dtype)
    ref_content = np.zeros((b, r_max), dtype)
    tgt_idx = np.zeros((b, n_max), np.int64)
    ref_idx = np.zeros((b, r_max), np.int64)
    positions = np.zeros((b, N_GLOBAL + n_max + r_max))
    for i, (zi, bd) in enumerate(zip(z_list, bundles)):
        n = len(zi)
        z[i, :n] = zi
        z_mask[i, :n] = 1
        tgt_idx[i, :n] = alignment_indices(AlignmentSpec(bd.c_tgt.step_seconds, FRAME_SECONDS, n, T))
        r = r_lens[i]
        ref_mask[i, :r] = 1
        if bd.x_ref is None:
            null_mask[i, :r] = 1
        else:
            x_ref[i, :r] = (np.asarray(bd.x_ref) - latent_shift) / latent_scale
            ref_content[i, :r] = 1
            ref_idx[i, :r] = alignment_indices(AlignmentSpec(bd.c_ref.step_seconds, FRAME_SECONDS, r, T))
        positions[i, :N_GLOBAL] = np.arange(N_GLOBAL)
        positions[i, N_GLOBAL : N_GLOBAL + n_max] = N_GLOBAL + np.arange(n_max)
        positions[i, N_GLOBAL + n_max :] = N_GLOBAL + n + np.arange(r_max)
    return Batch(
        z=z,
        z_mask=z_mask,
        x_ref=x_ref,
        null_mask=null_mask,
        ref_mask=ref_mask,
        c_tgt=np.stack([bd.c_tgt.steps for bd in bundles]).astype(dtype),
        c_ref=np.stack([bd.c_ref.steps for bd in bundles]).astype(dtype),
        tgt_idx=tgt_idx,
        ref_idx=ref_idx,
        ref_content=ref_content,
        t_feat=sinusoidal_features([bd.t for bd in bundles], n_features).astype(dtype),
        dur_feat=sinusoidal_features([bd.duration_seconds / MAX_DURATION for bd in bundles], n_features).astype(dtype),
        steps_feat=sinusoidal_features([bd.total_steps / MAX_TOTAL_STEPS for bd in bundles], n_features).astype(dtype),
        positions=positions,
    )


def _reference_sequence(store: L.ParamStore, x_ref: np.ndarray, null_mask: np.ndarray) -> Tensor:
    """x_ref with the learned null row substituted where blanked."""
    null = pad_rows(store["null_ref"], 0, x_ref.shape[1] - NULL_LENGTH, axis=0)
    return add(Tensor(x_ref), mul(null_mask[..., None], null))


def encode_content(
    store: L.ParamStore,
    config: DiTConfig,
    c_tgt: np.ndarray,
    c_ref: np.ndarray,
    ref_seq: Tensor,
    ref_mask: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Shared-weight encoder over target and reference grids (B, T, 10).

    Returns the (target, reference) feature halves, each (B, T, d).
    """
    b, T = c_tgt.shape[:2]
    if T == 0:
        raise ValueError("empty grid")
    if T > config.max_steps:
        raise ValueError(f"grid has {T} steps, encoder supports at most {config.max_steps}")
    grids = Tensor(np.concatenate([c_tgt, c_ref], axis=0))
    h = add(L.dense(store, "enc.in", grids), index(store["enc.pos"], slice(0, T)))
    for i in range(config.content_self_layers):
        h = L.self_block(store, f"enc.self{i}", h, config.heads)
    ctx = L.dense(store, "enc.ref", ref_seq)
    ctx = concat([ctx, ctx], axis=0)
    ctx_mask = np.concatenate([ref_mask, ref_mask], axis=0)
    for i in range(config.content_cross_layers):
        h = L.cross_block(store, f"enc.cross{i}", h, ctx, config.heads, key_mask=ctx_mask)
    h = L.norm(store, "enc.out", h)
    return index(h, slice(0, b)), index(h, slice(b, 2 * b))


def global_tokens(store: L.ParamStore, t_feat, dur_feat, steps_feat) -> Tensor:
    """(B, 3, d): diffusion time (MLP), duration and total-step conditioners (linear)."""
    tok_t = L.dense(store, "cond.t2", gelu(L.dense(store, "cond.t1", Tensor(t_feat))))
    tok_d = L.dense(store, "cond.dur", Tensor(dur_feat))
    tok_s = L.dense(store, "cond.steps", Tensor(steps_feat))
    return stack([tok_t, tok_d, tok_s], axis=1)


def dit_batch(store: L.ParamStore, config: DiTConfig, batch: Batch) -> Tensor:
    """Forward pass on a collated batch, returning v predictions (B, N, 64)."""
    b, n_max = batch.z_mask.shape
    ref_seq = _reference_sequence(store, batch.x_ref, batch.null_mask)
    c_tgt, c_ref = encode_content(store, config, batch.c_tgt, batch.c_ref, ref_seq, batch.ref_mask)

    bidx_z = np.repeat(np.arange(b)[:, None], n_max, axis=1)
    bidx_r = np.repeat(np.arange(b)[:, None], batch.ref_idx.shape[1], axis=1)
    hz = conv1d(Tensor(batch.z), store["dit.pre.w"], store["dit.pre.b"])
    hz = add(hz, gather(c_tgt, (bidx_z, batch.tgt_idx)))
    hr = conv1d(ref_seq, store["dit.pre.w"], store["dit.pre.b"])
    hr = add(hr, mul(batch.ref_content[..., None], gather(c_ref, (bidx_r, batch.ref_idx))))

    tokens = global_tokens(store, batch.t_feat, batch.dur_feat, batch.steps_feat)
    seq = concat([tokens, hz, hr], axis=1)
    key_mask = np.concatenate([np.ones((b, N_GLOBAL)), batch.z_mask, batch.ref_mask], axis=1)
    d_head = config.d_model // config.heads
    tables = L.rope_tables(batch.positions, d_head, dtype=batch.z.dtype)
    for i in range(config.layers):
        seq = L.self_block(store, f"dit.block{i}", seq, config.heads, key_mask=key_mask, rope_tables=tables)
    seq = L.norm(store, "dit.out_ln", seq)
    return L.dense(store, "dit.post", index(seq, (slice(None), slice(N_GLOBAL, N_GLOBAL + n_max))))


def batch_loss(store: L.ParamStore, config: DiTConfig, batch: Batch, v_target: np.ndarray) -> Tensor:
    """Masked v-objective: per-item mean over z_t positions, averaged over the batch."""
    return masked_mse(dit_batch(store, config, batch), v_target, batch.z_mask)


@dataclass
class DrumDiT:
    """Parameters plus config; the object the trainer and samplers work with.

    The network runs in model units ``(latent - latent_shift) / latent_scale``;
    ``sample`` and the condition references use plain latents.
    """

    config: DiTConfig
    params: L.ParamStore
    meta: dict = field(default_factory=dict)
    latent_shift: float = 0.0
    latent_scale: float = 1.0

    def to_model(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z) - self.latent_shift) / self.latent_scale

    def from_model(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.latent_scale + self.latent_shift

    @classmethod
    def create(cls, config: DiTConfig, seed: int = 0, dtype=np.float64) -> "DrumDiT":
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return self.params.dtype

    def collate(self, z_list, bundles) -> Batch:
        return collate(z_list, bundles, self.config.n_features, self.dtype, self.latent_shift, self.latent_scale)

    def content_encode(self, c_tgt: np.ndarray, c_ref: np.ndarray, x_ref: np.ndarray | None) -> np.ndarray:
        """ContentFeatures (2T, d): target-branch rows then reference-branch rows."""
        c_tgt = np.asarray(c_tgt)
        c_ref = np.asarray(c_ref)
        if c_tgt.shape[0] == 0 or c_ref.shape[0] == 0:
            raise ValueError("empty grid")
        if c_tgt.shape != c_ref.shape:
            raise ValueError("target and reference grids must have the same number of steps")
        T = c_tgt.shape[0]
        dt = self.dtype
        if x_ref is None:
            x = np.zeros((1, NULL_LENGTH, LATENT_DIM), dt)
            null_mask = np.ones((1, NULL_LENGTH), dt)
        else:
            x = self.to_model(x_ref).astype(dt)[None]
            null_mask = np.zeros(x.shape[:2], dt)
        with no_grad():
            ref_seq = _reference_sequence(self.params, x, null_mask)
            tgt, ref = encode_content(
                self.params, self.config, c_tgt[None].astype(dt), c_ref[None].astype(dt),
                ref_seq, np.ones(x.shape[:2], dt),
            )
        return np.concatenate([tgt.data[0], ref.data[0]], axis=0).reshape(2 * T, -1)

    def global_tokens(self, t: float, duration_seconds: float, total_steps: int) -> np.ndarray:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        f = self.config.n_features
        dt = self.dtype
        with no_grad():
            tokens = global_tokens(
                self.params,
                sinusoidal_features([t], f).astype(dt),
                sinusoidal_features([duration_seconds / MAX_DURATION], f).astype(dt),
                sinusoidal_features([total_steps / MAX_TOTAL_STEPS], f).astype(dt),
            )
        return tokens.data[0]

    def forward(self, z_t: np.ndarray, bundle: ConditionBundle) -> np.ndarray:
        """v prediction for one item, same shape as ``z_t`` (model units)."""
        batch = self.collate([np.asarray(z_t)], [bundle])
        with no_grad():
            return dit_batch(self.params, self.config, batch).data[0]

    def predict_many(self, z_list, bundles) -> list[np.ndarray]:
        batch = self.collate(z_list, bundles)
        with no_grad():
            out = dit_batch(self.params, self.config, batch).data
        return [out[i, : len(z)] for i, z in enumerate(z_list)]

    def sample(
        self,
        bundle: ConditionBundle,
        steps: int = 10,
        guidance_scale: float = 1.0,
        sampler: str = "dpmpp_2m",
        seed: int = 0,
        n_frames: int | None = None,
    ) -> np.ndarray:
        n = frames_for_duration(bundle.duration_seconds) if n_frames is None else n_frames

        def predict_v(z, t, blank):
            bd = bundle.blanked() if blank else bundle
            return self.forward(z, bd.at(t))

        x0 = diffusion.sample(predict_v, (n, LATENT_DIM), steps, guidance_scale, sampler, seed, self.dtype)
        return self.from_model(x0)


def dit_forward(model: DrumDiT, z_t: np.ndarray, bundle: ConditionBundle) -> np.ndarray:
    return model.forward(z_t, bundle)


def content_encode(model: DrumDiT, c_tgt, c_ref, x_ref) -> np.ndarray:
    return model.content_encode(c_tgt, c_ref, x_ref)


def build_global_tokens(model: DrumDiT, t: float, duration_seconds: float, total_steps: int) -> np.ndarray:
    return model.global_tokens(t, duration_seconds, total_steps)
