"""Two-bar loops, reference/target pairing, split hygiene and manifests.

Records are keyed by ``"<midi_id>|<kit_id>"``.  Stem records carry a
``parent_midi_id`` so that splits and pairing work on the source MIDI file,
never letting two stems of one file end up on both sides of a pair or in two
splits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .midi_core import (
    RESOLUTIONS,
    BinarizedGrid,
    DrumEvent,
    DrumGroup,
    TempoMap,
    binarize,
    grid_from_json,
    grid_to_json,
    step_seconds,
)
from .signals import frames_for_duration
from .synth_oracle import KitTimbre, load_kits, make_kit, pseudo_latent, render_events, save_kits

STYLES = ("Beat", "Fill")
SPLITS = ("train", "validation", "test")
SCHEMA_VERSION = 1
BARS = 2
QUARTERS_PER_WINDOW = 8
# size of the real-data build this format was designed for; kept as metadata only
REFERENCE_PAIR_COUNTS = {"train": 62595, "validation": 1202, "test": 791}


# --------------------------------------------------------------------------
# Records


def record_key(midi_id: str, kit_id: str) -> str:
    return f"{midi_id}|{kit_id}"


def split_key(key: str) -> tuple[str, str]:
    midi_id, _, kit_id = key.rpartition("|")
    if not midi_id:
        raise ValueError(f"malformed record key {key!r}")
    return midi_id, kit_id


@dataclass
class TrackRecord:
    midi_id: str
    kit_id: str
    style: str
    tempo: float
    grids: dict[int, BinarizedGrid]
    source: dict
    events: tuple[DrumEvent, ...] = ()
    parent_midi_id: str | None = None

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {self.style!r}")
        if not self.tempo > 0:
            raise ValueError("tempo must be positive")
        if not self.grids:
            raise ValueError("a track needs at least one grid")
        for res, g in self.grids.items():
            if g.bars != BARS:
                raise ValueError(f"grid at resolution {res} has {g.bars} bars, expected {BARS}")
            if g.resolution != res:
                raise ValueError(f"grid keyed {res} has resolution {g.resolution}")
        if "|" in self.kit_id:
            raise ValueError("kit_id may not contain '|'")

    @property
    def key(self) -> str:
        return record_key(self.midi_id, self.kit_id)

    @property
    def parent(self) -> str:
        return self.parent_midi_id or self.midi_id

    @property
    def duration(self) -> float:
        return QUARTERS_PER_WINDOW * 60.0 / self.tempo

    def to_json(self) -> dict:
        return {
            "type": "track",
            "midi_id": self.midi_id,
            "kit_id": self.kit_id,
            "parent_midi_id": self.parent_midi_id,
            "style": self.style,
            "tempo": self.tempo,
            "grids": {str(r): json.loads(grid_to_json(g)) for r, g in sorted(self.grids.items())},
            "events": [[e.onset_time, int(e.group), e.velocity] for e in self.events],
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrackRecord":
        return cls(
            midi_id=obj["midi_id"],
            kit_id=obj["kit_id"],
            style=obj["style"],
            tempo=float(obj["tempo"]),
            grids={int(r): grid_from_json(g) for r, g in obj["grids"].items()},
            source=obj.get("source", {}),
            events=tuple(DrumEvent(t, DrumGroup(g), v) for t, g, v in obj.get("events", [])),
            parent_midi_id=obj.get("parent_midi_id"),
        )


@dataclass(frozen=True)
class PairRecord:
    target: str
    reference: str
    kit_id: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> dict:
        return {"type": "pair", "target": self.target, "reference": self.reference,
                "kit_id": self.kit_id, "split": self.split}

    @classmethod
    def from_json(cls, obj: dict) -> "PairRecord":
        return cls(obj["target"], obj["reference"], obj["kit_id"], obj["split"])


def stem_records(record: TrackRecord, resolutions=None) -> list[TrackRecord]:
    """One isolated-stem record per drum group present in ``record``."""
    out = []
    for g in sorted({e.group for e in record.events}):
        events = tuple(e for e in record.events if e.group == g)
        grids = {
            r: binarize(events, record.tempo, r, BARS) for r in (resolutions or sorted(record.grids))
        }
        out.append(
            TrackRecord(
                midi_id=f"{record.midi_id}#{DrumGroup(g).name.lower()}",
                kit_id=record.kit_id,
                style=record.style,
                tempo=record.tempo,
                grids=grids,
                source=dict(record.source, stem=DrumGroup(g).name.lower()),
                events=events,
                parent_midi_id=record.parent,
            )
        )
    return out


# --------------------------------------------------------------------------
# Segmentation


class Segmentation(NamedTuple):
    windows: list[list[DrumEvent]]
    rejected: list[tuple[int, str]]


def segment_two_bars(events, tempo: TempoMap | float, length_seconds: float | None = None) -> Segmentation:
    """Cut a constant-tempo track into back-to-back 8-quarter-note windows.

    Without ``length_seconds`` the track is taken to end at the bar line
    after its last event.  A final partial window is dropped.  A window
    containing a tempo change is rejected, and so is every window after it,
    since their timing no longer follows the base tempo.
    """
    tm = tempo if isinstance(tempo, TempoMap) else TempoMap(float(tempo))
    window = QUARTERS_PER_WINDOW * 60.0 / tm.bpm
    bar = 4 * 60.0 / tm.bpm
    events = sorted(events, key=lambda e: (e.onset_time, int(e.group)))
    if length_seconds is None:
        length_seconds = math.ceil(events[-1].onset_time / bar + 1e-9) * bar if events else 0.0
    n = int(math.floor(length_seconds / window + 1e-9))
    change_at = next((t for t, b in tm.changes if b != tm.bpm), None)

    windows, rejected = [], []
    for w in range(n):
        start, end = w * window, (w + 1) * window
        if change_at is not None and change_at < end - 1e-9:
            if change_at > start + 1e-9:
                rejected.append((w, f"tempo change at {change_at:.3f}s inside window"))
            else:
                rejected.append((w, f"window follows tempo change at {change_at:.3f}s"))
            continue
        windows.append(
            [
                DrumEvent(max(0.0, e.onset_time - start), e.group, e.velocity)
                for e in events
                if start - 1e-9 <= e.onset_time < end - 1e-9
            ]
        )
    return Segmentation(windows, rejected)


# --------------------------------------------------------------------------
# Splits and pairing


@dataclass
class SplitPolicy:
    """Disjoint kit and MIDI partitions plus the pairing mode.

    ``mode="sample"`` draws ``k`` references per target for every epoch;
    ``mode="enumerate"`` emits every valid ordered pair.
    """

    kits: dict[str, frozenset]
    midis: dict[str, frozenset]
    mode: str = "sample"
    k: int = 1

    def __post_init__(self):
        self.kits = {s: frozenset(self.kits.get(s, ())) for s in SPLITS}
        self.midis = {s: frozenset(self.midis.get(s, ())) for s in SPLITS}
        if self.mode not in ("sample", "enumerate"):
            raise ValueError("mode must be 'sample' or 'enumerate'")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for table, what in ((self.kits, "kit"), (self.midis, "midi")):
            for i, a in enumerate(SPLITS):
                for b in SPLITS[i + 1 :]:
                    both = table[a] & table[b]
                    if both:
                        raise ValueError(f"{what} ids {sorted(both)} are in both {a} and {b}")

    def split_for(self, kit_id: str, midi_id: str) -> str | None:
        """Split holding both the kit and the MIDI, or None when they disagree."""
        for s in SPLITS:
            if kit_id in self.kits[s] and midi_id in self.midis[s]:
                return s
        return None

    def split_of(self, record: TrackRecord) -> str | None:
        return self.split_for(record.kit_id, record.parent)

    @classmethod
    def random(cls, kit_ids, midi_ids, fractions=(0.5, 0.25, 0.25), seed: int = 0, **kw) -> "SplitPolicy":
        rng = np.random.default_rng(seed)

        def cut(ids):
            ids = sorted(ids)
            order = [ids[i] for i in rng.permutation(len(ids))]
            n_train = int(round(fractions[0] * len(ids)))
            n_val = int(round(fractions[1] * len(ids)))
            return {
                "train": frozenset(order[:n_train]),
                "validation": frozenset(order[n_train : n_train + n_val]),
                "test": frozenset(order[n_train + n_val :]),
            }

        return cls(cut(kit_ids), cut(midi_ids), **kw)

    def to_json(self) -> dict:
        return {
            "kits": {s: sorted(v) for s, v in self.kits.items()},
            "midis": {s: sorted(v) for s, v in self.midis.items()},
            "mode": self.mode,
            "k": self.k,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitPolicy":
        return cls(obj["kits"], obj["midis"], obj.get("mode", "sample"), obj.get("k", 1))


class Pairing(NamedTuple):
    pairs: list[PairRecord]
    unpaired: list[tuple[str, str]]


def build_pairs(
    records: list[TrackRecord],
    policy: SplitPolicy,
    rng: np.random.Generator | None = None,
    splits=SPLITS,
) -> Pairing:
    """Pair each target with references from the same kit and split but another MIDI.

    Records whose kit and MIDI fall in different splits are left out
    silently; targets without any candidate reference are reported.
    """
    keys = [r.key for r in records]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate (midi_id, kit_id) records")
    if policy.mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    by_group: dict[tuple[str, str], list[TrackRecord]] = {}
    for r in sorted(records, key=lambda r: r.key):
        s = policy.split_of(r)
        if s in splits:
            by_group.setdefault((s, r.kit_id), []).append(r)

    pairs, unpaired = [], []
    for (s, kit), members in sorted(by_group.items(), key=lambda kv: (SPLITS.index(kv[0][0]), kv[0][1])):
        for tgt in members:
            cands = [r for r in members if r.parent != tgt.parent]
            if not cands:
                unpaired.append((tgt.key, f"kit {kit} has fewer than 2 MIDI sequences in {s}"))
                continue
            if policy.mode == "sample":
                pick = rng.choice(len(cands), size=min(policy.k, len(cands)), replace=False)
                cands = [cands[i] for i in sorted(pick)]
            pairs.extend(PairRecord(tgt.key, ref.key, kit, s) for ref in cands)
    return Pairing(pairs, unpaired)


def verify_splits(pairs: list[PairRecord], records: list[TrackRecord] | None = None) -> list[str]:
    """Every problem found, one line each; an empty list means the manifest is clean."""
    lookup = {r.key: r for r in records} if records is not None else {}
    violations = []
    kit_splits: dict[str, set] = {}
    midi_splits: dict[str, set] = {}
    member_splits: dict[str, set] = {}

    def parent_of(key: str) -> str:
        if key in lookup:
            return lookup[key].parent
        return split_key(key)[0].split("#", 1)[0]

    for i, p in enumerate(pairs):
        name = f"pair {i} ({p.target} -> {p.reference}, {p.split})"
        if records is not None:
            missing = [k for k in (p.target, p.reference) if k not in lookup]
            if missing:
                violations.append(f"{name}: unknown record(s) {missing}")
                continue
        t_midi, t_kit = split_key(p.target)
        r_midi, r_kit = split_key(p.reference)
        if t_kit != r_kit:
            violations.append(f"{name}: members have different kit_ids {t_kit} and {r_kit}")
        elif t_kit != p.kit_id:
            violations.append(f"{name}: kit_id {p.kit_id} does not match its members ({t_kit})")
        if parent_of(p.target) == parent_of(p.reference):
            violations.append(f"{name}: target and reference share MIDI {parent_of(p.target)}")
        for kit in {t_kit, r_kit}:
            kit_splits.setdefault(kit, set()).add(p.split)
        for key in (p.target, p.reference):
            midi_splits.setdefault(parent_of(key), set()).add(p.split)
            member_splits.setdefault(key, set()).add(p.split)

    def order(splits):
        return ", ".join(s for s in SPLITS if s in splits)

    for kit, ss in sorted(kit_splits.items()):
        if len(ss) > 1:
            violations.append(f"kit {kit} appears in several splits: {order(ss)}")
    for midi, ss in sorted(midi_splits.items()):
        if len(ss) > 1:
            violations.append(f"midi {midi} appears in several splits: {order(ss)}")
    return violations


# --------------------------------------------------------------------------
# Manifests


@dataclass
class Manifest:
    header: dict
    records: list[TrackRecord]
    pairs: list[PairRecord]
    policy: SplitPolicy | None = None
    _idx: dict | None = field(default=None, init=False, repr=False, compare=False)

    def record(self, key: str) -> TrackRecord:
        return self._index()[key]

    def _index(self) -> dict[str, TrackRecord]:
        if self._idx is None or len(self._idx) != len(self.records):
            self._idx = {r.key: r for r in self.records}
        return self._idx

    def split_pairs(self, split: str) -> list[PairRecord]:
        return [p for p in self.pairs if p.split == split]

    def split_records(self, split: str) -> list[TrackRecord]:
        if self.policy is None:
            keys = {p.target for p in self.pairs if p.split == split}
            return [r for r in self.records if r.key in keys]
        return [r for r in self.records if self.policy.split_of(r) == split]


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    """JSON lines: a header, then tracks sorted by key, then pairs sorted by (split, ids)."""
    header = {
        "type": "header",
        "schema_version": SCHEMA_VERSION,
        "reference_pair_counts": REFERENCE_PAIR_COUNTS,
        **{k: v for k, v in manifest.header.items() if k not in ("type", "schema_version")},
    }
    if manifest.policy is not None:
        header["split_policy"] = manifest.policy.to_json()
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in sorted(manifest.records, key=lambda r: r.key)]
    lines += [
        json.dumps(p.to_json(), sort_keys=True)
        for p in sorted(manifest.pairs, key=lambda p: (SPLITS.index(p.split), p.target, p.reference))
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    header, records, pairs = None, [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        kind = obj.get("type")
        if kind == "header":
            header = obj
        elif kind == "track":
            records.append(TrackRecord.from_json(obj))
        elif kind == "pair":
            pairs.append(PairRecord.from_json(obj))
        else:
            raise ValueError(f"{path}:{n}: unknown line type {kind!r}")
    if header is None:
        raise ValueError(f"{path}: missing header line")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    policy = SplitPolicy.from_json(header["split_policy"]) if "split_policy" in header else None
    return Manifest(header, records, pairs, policy)


# --------------------------------------------------------------------------
# Synthetic patterns and the toy corpus

_BEAT_GROUPS = [
    (DrumGroup.KICK, 4), (DrumGroup.SNARE, 3), (DrumGroup.HIHAT_CLOSED, 3),
    (DrumGroup.HIHAT_OPEN, 1), (DrumGroup.RIDE, 1), (DrumGroup.CRASH, 1),
]
_FILL_GROUPS = [
    (DrumGroup.SNARE, 3), (DrumGroup.TOM_HIGH, 2), (DrumGroup.TOM_MID, 2), (DrumGroup.TOM_LOW, 2),
    (DrumGroup.KICK, 1),
]
# micro-timing in 64th notes: a third of the hits sit 2 64ths off the 8th-note slot
_OFFSETS = np.array([-2, -1, 0, 1, 2])
_OFFSET_P = np.array([0.2, 0.15, 0.3, 0.15, 0.2])
TOY_TEMPO_RANGE = (60.0, 70.0)


def _draw_group(rng, table) -> DrumGroup:
    w = np.array([x[1] for x in table], dtype=float)
    return table[int(rng.choice(len(table), p=w / w.sum()))][0]


def generate_pattern(rng: np.random.Generator, style: str, bpm: float) -> list[DrumEvent]:
    """A sparse two-bar pattern on 8th-note slots with 64th-note micro-timing.

    Beats repeat bar one with small changes; fills replace bar two with a
    denser tom/snare phrase.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    dt = step_seconds(bpm, 64)
    bar_one = sorted({0, *rng.choice(np.arange(1, 8), size=int(rng.integers(2, 5)), replace=False).tolist()})
    slots = [(s, _draw_group(rng, _BEAT_GROUPS)) for s in bar_one]
    if style == "Beat":
        for s, g in list(slots):
            if rng.random() < 0.85:
                slots.append((s + 8, g))
        if rng.random() < 0.5:
            extra = int(rng.integers(9, 16))
            if all(s != extra for s, _ in slots):
                slots.append((extra, _draw_group(rng, _BEAT_GROUPS)))
    else:
        bar_two = rng.choice(np.arange(8, 16), size=int(rng.integers(4, 7)), replace=False)
        slots += [(int(s), _draw_group(rng, _FILL_GROUPS)) for s in bar_two]
    events = []
    for s, g in sorted(slots):
        pos = int(np.clip(8 * s + rng.choice(_OFFSETS, p=_OFFSET_P), 0, 127))
        events.append(DrumEvent(pos * dt, g))
        if g not in (DrumGroup.HIHAT_CLOSED, DrumGroup.HIHAT_OPEN) and rng.random() < 0.25:
            events.append(DrumEvent(pos * dt, DrumGroup.HIHAT_CLOSED))
    return sorted(set(events), key=lambda e: (e.onset_time, int(e.group)))


def render_latent(events, duration: float, kit: KitTimbre) -> np.ndarray:
    """Pseudo-latent of a rendered window, cut to the window's frame count."""
    lat = pseudo_latent(render_events(events, duration, kit)).frames
    return lat[: frames_for_duration(duration)]


@dataclass
class ToyCorpus:
    kits: list[KitTimbre]
    manifest: Manifest
    latents: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def records(self) -> list[TrackRecord]:
        return self.manifest.records

    @property
    def policy(self) -> SplitPolicy:
        return self.manifest.policy

    def kit(self, kit_id: str) -> KitTimbre:
        return next(k for k in self.kits if k.kit_id == kit_id)

    def latent(self, key: str) -> np.ndarray:
        if key not in self.latents:
            rec = self.manifest.record(key)
            self.latents[key] = render_latent(rec.events, rec.duration, self.kit(rec.kit_id))
        return self.latents[key]

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_kits(d / "kits.json", self.kits)
        write_manifest(d / "manifest.jsonl", self.manifest)
        for key in sorted(self.manifest._index()):
            self.latent(key)
        np.savez(d / "latents.npz", **{k: self.latents[k] for k in sorted(self.latents)})

    @classmethod
    def load(cls, directory: str | Path) -> "ToyCorpus":
        d = Path(directory)
        manifest = read_manifest(d / "manifest.jsonl")
        latents = {}
        if (d / "latents.npz").exists():
            with np.load(d / "latents.npz") as z:
                latents = {k: z[k] for k in z.files}
        return cls(load_kits(d / "kits.json"), manifest, latents)


def build_toy_corpus(
    n_kits: int = 4,
    n_patterns: int = 64,
    seed: int = 0,
    resolutions=RESOLUTIONS,
    kit_split=(2, 1, 1),
    midi_split=(48, 8, 8),
    fill_fraction: float = 0.25,
    tempo_range=TOY_TEMPO_RANGE,
) -> ToyCorpus:
    """Synthetic kits and patterns with disjoint kit and MIDI splits.

    Only (kit, pattern) combinations inside one split become records, so the
    corpus has no cross-split material at all.
    """
    if sum(kit_split) != n_kits or sum(midi_split) != n_patterns:
        raise ValueError("split sizes must add up to the kit and pattern counts")
    ss = np.random.SeedSequence(seed)
    kit_seq, pat_seq, split_seq = ss.spawn(3)
    kit_seeds = kit_seq.generate_state(n_kits)
    kits = [make_kit(f"kit{i:02d}", int(s)) for i, s in enumerate(kit_seeds)]
    rng = np.random.default_rng(pat_seq)
    patterns = []
    for j in range(n_patterns):
        style = "Fill" if rng.random() < fill_fraction else "Beat"
        bpm = float(np.round(rng.uniform(*tempo_range), 3))
        patterns.append((f"p{j:03d}", style, bpm, generate_pattern(rng, style, bpm)))

    srng = np.random.default_rng(split_seq)
    kit_order = [kits[i].kit_id for i in srng.permutation(n_kits)]
    pat_order = [patterns[i][0] for i in srng.permutation(n_patterns)]

    def cut(ids, sizes):
        bounds = np.cumsum((0,) + tuple(sizes))
        return {s: frozenset(ids[bounds[i] : bounds[i + 1]]) for i, s in enumerate(SPLITS)}

    policy = SplitPolicy(cut(kit_order, kit_split), cut(pat_order, midi_split))
    records = []
    for midi_id, style, bpm, events in patterns:
        for kit in kits:
            s = next(s for s in SPLITS if midi_id in policy.midis[s])
            if kit.kit_id not in policy.kits[s]:
                continue
            records.append(
                TrackRecord(
                    midi_id=midi_id,
                    kit_id=kit.kit_id,
                    style=style,
                    tempo=bpm,
                    grids={r: binarize(events, bpm, r, BARS) for r in resolutions},
                    source={"synthetic": True, "kit_seed": kit.seed},
                    events=tuple(events),
                )
            )
    pairs = build_pairs(records, SplitPolicy(policy.kits, policy.midis, mode="enumerate")).pairs
    header = {"corpus": "toy", "seed": seed, "n_kits": n_kits, "n_patterns": n_patterns}
    return ToyCorpus(kits, Manifest(header, records, pairs, policy))
