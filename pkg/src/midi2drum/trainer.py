"""Curriculum training with reference dropout, InverseLR and resumable checkpoints.

Every random draw comes from a stream keyed by ``(seed, epoch, item)`` (or
``(seed, epoch)`` for pairing and shuffling), so a run resumed from a
checkpoint sees exactly the draws an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataset import Manifest, PairRecord, SplitPolicy, ToyCorpus, build_pairs, verify_splits
from .midi_core import N_GROUPS, ONSET_COLUMN, BinarizedGrid, Projection, project_grid
from .model import diffusion
from .model.network import PRESETS, ConditionBundle, DiTConfig, DrumDiT, batch_loss
from .tensor_nn import adamw_step, load_checkpoint, no_grad, save_checkpoint

log = logging.getLogger(__name__)

PAIR_STREAM = 1
ITEM_STREAM = 2
VAL_STREAM = 3
INIT_STREAM = 4


@dataclass(frozen=True)
class CurriculumState:
    epoch: int
    total_epochs: int
    p_arr_target: float
    p_tap_reference: float

    def __post_init__(self):
        for name in ("p_arr_target", "p_tap_reference"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")


def curriculum_probs(epoch: int, total_epochs: int) -> tuple[float, float]:
    """(p_arr_target, p_tap_reference), moving linearly from (1, 0.5) to (0.5, 1)."""
    if total_epochs < 1 or not 0 <= epoch < total_epochs:
        raise ValueError(f"need 0 <= epoch < total_epochs, got {epoch}, {total_epochs}")
    frac = 1.0 if total_epochs == 1 else epoch / (total_epochs - 1)
    return 1.0 - 0.5 * frac, 0.5 + 0.5 * frac


def curriculum_state(epoch: int, total_epochs: int) -> CurriculumState:
    return CurriculumState(epoch, total_epochs, *curriculum_probs(epoch, total_epochs))


class Conditions(NamedTuple):
    c_tgt: BinarizedGrid
    c_ref: BinarizedGrid
    blank_x_ref: bool


def select_conditions(
    rng: np.random.Generator,
    probs: tuple[float, float] | CurriculumState,
    target_grid: BinarizedGrid,
    ref_grid: BinarizedGrid,
    cfg_dropout: float = 0.10,
) -> Conditions:
    """Draw the target view, the reference view and the x_ref blank flag, in that order."""
    if isinstance(probs, CurriculumState):
        probs = (probs.p_arr_target, probs.p_tap_reference)
    p_arr, p_tap = probs
    tgt_mode = Projection.ARRANGEMENT if rng.random() < p_arr else Projection.TAP
    ref_mode = Projection.TAP if rng.random() < p_tap else Projection.ARRANGEMENT
    blank = bool(rng.random() < cfg_dropout)
    return Conditions(project_grid(target_grid, tgt_mode), project_grid(ref_grid, ref_mode), blank)


def lr_schedule(step: int, base_lr: float, gamma: float = 1e-3, power: float = 1.0) -> float:
    """InverseLR: base_lr / (1 + gamma * step) ** power."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return base_lr / (1.0 + gamma * step) ** power


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    cfg_dropout: float = 0.10
    seed: int = 0
    lr_gamma: float = 1e-3
    lr_power: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    resolution: int = 64
    normalize_latents: bool = True
    preset: str = "toy"
    dtype: str = "float32"
    val_repeats: int = 4
    keep_checkpoints: int = 2

    def __post_init__(self):
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.val_repeats < 1:
            raise ValueError("batch_size and val_repeats must be >= 1, epochs >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        obj = dict(obj)
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


# settings used for the desk-scale runs: a larger step size than the
# full-scale default so a few thousand updates are enough
TOY_CONFIG = TrainConfig(lr=1e-3, epochs=60, lr_gamma=1e-3)


# --------------------------------------------------------------------------
# Data access


class TrainItem(NamedTuple):
    key: str
    z0: np.ndarray
    target: BinarizedGrid
    reference: BinarizedGrid
    x_ref: np.ndarray


class LatentSource:
    """Manifest plus a latent lookup (a ToyCorpus or a dict of arrays)."""

    def __init__(self, manifest: Manifest, latents):
        self.manifest = manifest
        self._latents = latents

    @classmethod
    def from_corpus(cls, corpus: ToyCorpus) -> "LatentSource":
        return cls(corpus.manifest, corpus)

    def latent(self, key: str) -> np.ndarray:
        if isinstance(self._latents, ToyCorpus):
            return self._latents.latent(key)
        return self._latents[key]

    def item(self, pair: PairRecord, resolution: int) -> TrainItem:
        tgt = self.manifest.record(pair.target)
        ref = self.manifest.record(pair.reference)
        if resolution not in tgt.grids or resolution not in ref.grids:
            raise ValueError(f"pair {pair.target} -> {pair.reference} has no grid at resolution {resolution}")
        return TrainItem(pair.target, self.latent(pair.target), tgt.grids[resolution],
                         ref.grids[resolution], self.latent(pair.reference))


def latent_statistics(source: LatentSource) -> tuple[float, float]:
    """Mean and standard deviation over every training-split latent value."""
    keys = sorted({r.key for r in source.manifest.split_records("train")})
    if not keys:
        raise ValueError("manifest has no training records")
    values = np.concatenate([source.latent(k).reshape(-1) for k in keys])
    return float(values.mean()), float(max(values.std(), 1e-6))


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def epoch_pairs(source: LatentSource, config: TrainConfig, epoch: int) -> list[PairRecord]:
    """Fresh K=1 pairing of every training target, shuffled; depends only on (seed, epoch)."""
    manifest = source.manifest
    rng = _rng(config.seed, PAIR_STREAM, epoch)
    if manifest.policy is not None:
        policy = replace(manifest.policy, mode="sample", k=1)
        pairs = build_pairs(manifest.records, policy, rng, splits=("train",)).pairs
    else:
        by_target: dict[str, list[PairRecord]] = {}
        for p in manifest.split_pairs("train"):
            by_target.setdefault(p.target, []).append(p)
        pairs = [v[int(rng.integers(len(v)))] for _, v in sorted(by_target.items())]
    return [pairs[i] for i in rng.permutation(len(pairs))]


def validation_pairs(source: LatentSource) -> list[PairRecord]:
    """One fixed reference per validation target (the first in manifest order)."""
    seen, out = set(), []
    for p in sorted(source.manifest.split_pairs("validation"), key=lambda p: (p.target, p.reference)):
        if p.target not in seen:
            seen.add(p.target)
            out.append(p)
    return out


# --------------------------------------------------------------------------
# Steps


class Draw(NamedTuple):
    key: str
    t: float
    target_mode: str
    reference_mode: str
    blank: bool


def _prepare(model: DrumDiT, items, conds, ts, noises):
    z_list, v_list, bundles = [], [], []
    for it, cond, t, z1 in zip(items, conds, ts, noises):
        z_t, v = diffusion.forward_diffusion(model.to_model(it.z0), z1, t)
        bundles.append(
            ConditionBundle.from_grids(cond.c_tgt, cond.c_ref, None if cond.blank_x_ref else it.x_ref, t=t)
        )
        z_list.append(z_t)
        v_list.append(v)
    batch = model.collate(z_list, bundles)
    target = np.zeros_like(batch.z)
    for i, v in enumerate(v_list):
        target[i, : len(v)] = v
    return batch, target


def train_step(
    model: DrumDiT,
    items: list[TrainItem],
    curriculum: CurriculumState,
    config: TrainConfig,
    rngs: list[np.random.Generator],
    lr: float,
) -> tuple[float, list[Draw]]:
    """One AdamW update on a batch; returns the batch loss and what was drawn per item."""
    if not items:
        raise ValueError("empty batch")
    for it in items:
        if it.z0.shape[1:] != it.x_ref.shape[1:]:
            raise ValueError(f"{it.key}: target and reference latents differ in width")
    conds, ts, noises = [], [], []
    for it, rng in zip(items, rngs):
        conds.append(select_conditions(rng, curriculum, it.target, it.reference, config.cfg_dropout))
        ts.append(float(rng.uniform(0.0, 1.0)))
        noises.append(rng.standard_normal(it.z0.shape))
    batch, target = _prepare(model, items, conds, ts, noises)
    model.params.zero_grad()
    loss = batch_loss(model.params, model.config, batch, target)
    draws = [Draw(it.key, t, _mode(c.c_tgt), _mode(c.c_ref), c.blank_x_ref) for it, c, t in zip(items, conds, ts)]
    value = float(loss.data)
    if not np.isfinite(value):
        detail = ", ".join(f"{d.key}@t={d.t:.4f}" for d in draws)
        raise FloatingPointError(f"non-finite loss {value} on batch [{detail}]")
    loss.backward()
    adamw_step(model.params, model.params.grads(), lr, config.betas, config.eps, config.weight_decay)
    return value, draws


def _mode(grid: BinarizedGrid) -> str:
    # an all-empty grid reads as Arrangement; both views coincide there
    tap = not grid.steps[:, :N_GROUPS].any() and grid.steps[:, ONSET_COLUMN].any()
    return (Projection.TAP if tap else Projection.ARRANGEMENT).value


def validation_loss(model: DrumDiT, source: LatentSource, config: TrainConfig) -> float:
    """Mean v-loss on the validation split under fixed draws.

    Conditions are fixed to Arrangement target, Tap reference, x_ref kept;
    t and noise come from a stream that does not depend on the epoch, so the
    number is comparable across epochs.
    """
    pairs = validation_pairs(source)
    if not pairs:
        raise ValueError("manifest has no validation pairs")
    jobs = []
    for i, p in enumerate(pairs):
        it = source.item(p, config.resolution)
        cond = Conditions(project_grid(it.target, Projection.ARRANGEMENT),
                          project_grid(it.reference, Projection.TAP), False)
        for r in range(config.val_repeats):
            rng = _rng(config.seed, VAL_STREAM, i, r)
            jobs.append((it, cond, float(rng.uniform(0.0, 1.0)), rng.standard_normal(it.z0.shape)))
    losses = []
    with no_grad():
        for s in range(0, len(jobs), config.batch_size):
            chunk = jobs[s : s + config.batch_size]
            items, conds, ts, noises = zip(*chunk)
            batch, target = _prepare(model, items, conds, ts, noises)
            loss = batch_loss(model.params, model.config, batch, target)
            losses.append(float(loss.data) * len(chunk))
    return float(np.sum(losses) / len(jobs))


# --------------------------------------------------------------------------
# Loop, checkpoints


def checkpoint_path(directory: Path, epoch: int) -> Path:
    return directory / f"ckpt_epoch{epoch:04d}.m2d"


def save_model(path: str | Path, model: DrumDiT, meta: dict) -> None:
    meta = dict(meta, model_config=asdict(model.config), adam_step=model.params.step,
                dtype=model.params.dtype.name, latent_shift=model.latent_shift, latent_scale=model.latent_scale)
    save_checkpoint(path, model.params.state_arrays(), meta)


def load_model(path: str | Path) -> tuple[DrumDiT, dict]:
    arrays, meta = load_checkpoint(path)
    config = DiTConfig(**meta["model_config"])
    model = DrumDiT.create(config, 0, np.dtype(meta.get("dtype", "float64")))
    model.params.load_arrays(arrays, int(meta.get("adam_step", 0)))
    model.latent_shift = float(meta.get("latent_shift", 0.0))
    model.latent_scale = float(meta.get("latent_scale", 1.0))
    model.meta = meta
    return model, meta


def latest_checkpoint(directory: str | Path) -> Path | None:
    found = sorted(Path(directory).glob("ckpt_epoch*.m2d"))
    return found[-1] if found else None


@dataclass
class TrainResult:
    model: DrumDiT
    initial_val_loss: float
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def final_val_loss(self) -> float:
        return self.history[-1]["val_loss"] if self.history else self.initial_val_loss


def train_loop(
    source: LatentSource,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
    on_epoch=None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs, validating and checkpointing after each.

    With ``out_dir`` set, writes ``ckpt_epochNNNN.m2d`` (NNNN = completed
    epochs, 0 being the initialization), ``metrics.jsonl`` with one record per
    epoch, and ``run.json``.  ``resume`` continues from the newest checkpoint.
    """
    violations = verify_splits(source.manifest.pairs, source.manifest.records)
    if violations:
        raise ValueError(f"manifest fails split verification: {violations[0]} ({len(violations)} total)")
    dtype = np.dtype(config.dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    history: list[dict] = []
    ckpt = latest_checkpoint(out) if (out is not None and resume) else None
    if ckpt is not None:
        model, meta = load_model(ckpt)
        if meta.get("train_config") != json.loads(json.dumps(config.to_dict())):
            raise ValueError(f"{ckpt} was written with a different training config")
        start_epoch = int(meta["epoch"])
        initial = float(meta["initial_val_loss"])
        log_path = out / "metrics.jsonl"
        if log_path.exists():
            history = [json.loads(x) for x in log_path.read_text().splitlines() if x.strip()]
            history = [h for h in history if h["epoch"] < start_epoch]
    else:
        init_seed = int(np.random.SeedSequence([config.seed, INIT_STREAM]).generate_state(1)[0])
        model = DrumDiT.create(PRESETS[config.preset], init_seed, dtype)
        if config.normalize_latents:
            model.latent_shift, model.latent_scale = latent_statistics(source)
        initial = validation_loss(model, source, config)
        if out is not None:
            (out / "run.json").write_text(json.dumps(
                {"train_config": config.to_dict(), "initial_val_loss": initial}, indent=1, sort_keys=True) + "\n")
            _save_epoch(out, model, config, 0, initial, config.keep_checkpoints)
            (out / "metrics.jsonl").write_text("")

    for epoch in range(start_epoch, config.epochs):
        cur = curriculum_state(epoch, config.epochs)
        pairs = epoch_pairs(source, config, epoch)
        losses, lr = [], lr_schedule(model.params.step, config.lr, config.lr_gamma, config.lr_power)
        for b in range(0, len(pairs), config.batch_size):
            chunk = pairs[b : b + config.batch_size]
            items = [source.item(p, config.resolution) for p in chunk]
            rngs = [_rng(config.seed, ITEM_STREAM, epoch, b + j) for j in range(len(chunk))]
            lr = lr_schedule(model.params.step, config.lr, config.lr_gamma, config.lr_power)
            loss, _ = train_step(model, items, cur, config, rngs, lr)
            losses.append(loss)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_loss": validation_loss(model, source, config),
            "lr": lr,
            "p_arr_target": cur.p_arr_target,
            "p_tap_reference": cur.p_tap_reference,
        }
        history.append(record)
        log.info("epoch %d train %.4f val %.4f", epoch, record["train_loss"], record["val_loss"])
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            _save_epoch(out, model, config, epoch + 1, initial, config.keep_checkpoints)
        if on_epoch is not None:
            on_epoch(record)

    model.meta = {"train_config": config.to_dict(), "epoch": config.epochs, "initial_val_loss": initial}
    final = latest_checkpoint(out) if out is not None else None
    return TrainResult(model, initial, history, final)


def _save_epoch(out: Path, model: DrumDiT, config: TrainConfig, epoch: int, initial: float, keep: int):
    save_model(checkpoint_path(out, epoch), model,
               {"train_config": config.to_dict(), "epoch": epoch, "initial_val_loss": initial})
    if keep > 0:
        for old in sorted(out.glob("ckpt_epoch*.m2d"))[:-keep]:
            old.unlink()
