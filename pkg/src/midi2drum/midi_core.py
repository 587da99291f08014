"""Drum MIDI ingestion and rhythm-grid quantization.

Standard MIDI Files are parsed into :class:`DrumEvent` lists, percussion
pitches are folded into nine drum groups, and the events are quantized onto
a tempo-relative grid of ``T`` steps by 10 columns.  Columns 0..8 carry the
per-group hits (the *Arrangement* view); column 9 is the global onset flag,
which on its own forms the *Tap* view.

Binary grid format (``grid_to_bytes`` / ``grid_from_bytes``), little endian::

    offset  size  field
    0       4     magic b"DGRD"
    4       1     format version (1)
    5       1     resolution (16, 32 or 64)
    6       2     bars (uint16)
    8       8     bpm (float64)
    16      4     T, number of rows (uint32)
    20      2*T   one uint16 bitmask per row, bit c set <=> column c is 1
"""

from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

N_GROUPS = 9
N_COLUMNS = 10
ONSET_COLUMN = 9
RESOLUTIONS = (16, 32, 64)
DEFAULT_BPM = 120.0

GRID_MAGIC = b"DGRD"
GRID_FORMAT_VERSION = 1


class DrumGroup(enum.IntEnum):
    """Nine percussion groups; the integer value is the grid column."""

    KICK = 0
    SNARE = 1
    HIHAT_CLOSED = 2
    HIHAT_OPEN = 3
    TOM_LOW = 4
    TOM_MID = 5
    TOM_HIGH = 6
    CRASH = 7
    RIDE = 8


# General MIDI percussion -> group, the 9-class reduction used by the Groove corpus.
PITCH_TABLE: dict[int, DrumGroup] = {}
for _group, _pitches in (
    (DrumGroup.KICK, (35, 36)),
    (DrumGroup.SNARE, (37, 38, 40)),
    (DrumGroup.HIHAT_CLOSED, (22, 42, 44)),
    (DrumGroup.HIHAT_OPEN, (26, 46)),
    (DrumGroup.TOM_LOW, (41, 43, 58)),
    (DrumGroup.TOM_MID, (45, 47)),
    (DrumGroup.TOM_HIGH, (48, 50)),
    (DrumGroup.CRASH, (49, 52, 55, 57)),
    (DrumGroup.RIDE, (51, 53, 59)),
):
    for _p in _pitches:
        PITCH_TABLE[_p] = _group

# One representative pitch per group, used when writing SMF files.
GROUP_PITCH = {
    DrumGroup.KICK: 36,
    DrumGroup.SNARE: 38,
    DrumGroup.HIHAT_CLOSED: 42,
    DrumGroup.HIHAT_OPEN: 46,
    DrumGroup.TOM_LOW: 43,
    DrumGroup.TOM_MID: 47,
    DrumGroup.TOM_HIGH: 50,
    DrumGroup.CRASH: 49,
    DrumGroup.RIDE: 51,
}


class MidiParseError(ValueError):
    """Raised for malformed SMF data; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DrumEvent:
    onset_time: float
    group: DrumGroup
    velocity: int = 100

    def __post_init__(self):
        if self.onset_time < 0:
            raise ValueError(f"onset_time must be >= 0, got {self.onset_time}")


@dataclass
class TempoMap:
    """Tempo of a track. ``changes`` lists later (time_seconds, bpm) set-tempo events."""

    bpm: float = DEFAULT_BPM
    time_signature: tuple[int, int] = (4, 4)
    changes: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.bpm > 0:
            raise ValueError(f"bpm must be positive, got {self.bpm}")


class ParsedMidi(NamedTuple):
    events: list[DrumEvent]
    tempo: TempoMap
    unmapped: int
    length_seconds: float


class Projection(str, enum.Enum):
    ARRANGEMENT = "arrangement"
    TAP = "tap"


def step_seconds(bpm: float, resolution: int) -> float:
    return (60.0 / bpm) * (4.0 / resolution)


def grid_length(bars: int, resolution: int, beats_per_bar: int = 4) -> int:
    return bars * beats_per_bar * resolution // 4


@dataclass
class BinarizedGrid:
    steps: np.ndarray
    resolution: int
    bpm: float
    bars: int

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.uint8)
        if self.resolution not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}")
        if self.steps.ndim != 2 or self.steps.shape[1] != N_COLUMNS:
            raise ValueError(f"grid must be T x {N_COLUMNS}, got {self.steps.shape}")

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0]

    @property
    def step_seconds(self) -> float:
        return step_seconds(self.bpm, self.resolution)

    @property
    def duration(self) -> float:
        return self.n_steps * self.step_seconds

    def is_valid(self) -> bool:
        s = self.steps
        return bool(
            np.isin(s, (0, 1)).all()
            and (s[:, ONSET_COLUMN] == s[:, :N_GROUPS].max(axis=1)).all()
            and self.n_steps == grid_length(self.bars, self.resolution)
        )

    def with_steps(self, steps: np.ndarray) -> "BinarizedGrid":
        return BinarizedGrid(steps, self.resolution, self.bpm, self.bars)

    def __eq__(self, other):
        if not isinstance(other, BinarizedGrid):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.bars == other.bars
            and self.bpm == other.bpm
            and np.array_equal(self.steps, other.steps)
        )


def map_pitch_to_group(pitch: int) -> DrumGroup | None:
    return PITCH_TABLE.get(pitch)


# --------------------------------------------------------------------------
# SMF reading


def _read_varlen(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def _read_chunk(data: bytes, pos: int) -> tuple[bytes, int, int]:
    if pos + 8 > len(data):
        raise MidiParseError("truncated chunk header", pos)
    tag = data[pos : pos + 4]
    (length,) = struct.unpack(">I", data[pos + 4 : pos + 8])
    start = pos + 8
    if start + length > len(data):
        raise MidiParseError(f"chunk {tag!r} claims {length} bytes, file too short", pos)
    return tag, start, start + length


def _parse_track(data: bytes, start: int, end: int):
    """Yield (tick, kind, payload) for note-on, tempo and time signature events."""
    tick = 0
    pos = start
    status = None
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("truncated event", pos)
        byte = data[pos]
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None or status >= 0xF0:
            raise MidiParseError("running status without a prior status byte", pos)

        if status == 0xFF:
            if pos >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos]
            length, pos = _read_varlen(data, pos + 1, end)
            if pos + length > end:
                raise MidiParseError("truncated meta event payload", pos)
            payload = data[pos : pos + length]
            pos += length
            status = None
            if meta_type == 0x51 and length == 3:
                yield tick, "tempo", int.from_bytes(payload, "big")
            elif meta_type == 0x58 and length >= 2:
                yield tick, "timesig", (payload[0], 2 ** payload[1])
            elif meta_type == 0x2F:
                yield tick, "end", None
                return
        elif status in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos, end)
            if pos + length > end:
                raise MidiParseError("truncated sysex payload", pos)
            pos += length
            status = None
        else:
            kind = status & 0xF0
            n_data = 1 if kind in (0xC0, 0xD0) else 2
            if pos + n_data > end:
                raise MidiParseError("truncated channel event", pos)
            args = data[pos : pos + n_data]
            pos += n_data
            if kind == 0x90 and args[1] > 0:
                yield tick, "note", (status & 0x0F, args[0], args[1])
    yield tick, "end", None


class _TickClock:
    """Piecewise-constant tempo map from ticks to seconds."""

    def __init__(self, division: int, tempo_events: list[tuple[int, int]]):
        self.smpte = bool(division & 0x8000)
        if self.smpte:
            fps = 256 - (division >> 8)
            fps = 29.97 if fps == 29 else fps
            self.seconds_per_tick = 1.0 / (fps * (division & 0xFF))
        else:
            if division == 0:
                raise MidiParseError("division of zero ticks per quarter note", 12)
            self.ppq = division
        self.breaks: list[tuple[int, float, int]] = []  # (tick, seconds_at_tick, us_per_quarter)
        seconds, last_tick, us = 0.0, 0, 500000
        for tick, new_us in sorted(tempo_events):
            if not self.smpte:
                seconds += (tick - last_tick) * us / (1e6 * self.ppq)
            last_tick, us = tick, new_us
            self.breaks.append((tick, seconds, us))

    def seconds(self, tick: int) -> float:
        if self.smpte:
            return tick * self.seconds_per_tick
        base_tick, base_s, us = 0, 0.0, 500000
        for b_tick, b_s, b_us in self.breaks:
            if b_tick > tick:
                break
            base_tick, base_s, us = b_tick, b_s, b_us
        return base_s + (tick - base_tick) * us / (1e6 * self.ppq)


def parse_smf(data: bytes, channel: int | None = None) -> ParsedMidi:
    """Parse a type-0 or type-1 SMF into drum events and a tempo map.

    Note-ons with velocity 0 are note-offs and ignored.  Pitches outside the
    drum table are skipped and counted in ``unmapped``.  When ``channel`` is
    given only that (0-based) channel is read.
    """
    tag, start, end = _read_chunk(data, 0)
    if tag != b"MThd" or end - start < 6:
        raise MidiParseError("missing MThd header", 0)
    fmt, n_tracks, division = struct.unpack(">HHH", data[start : start + 6])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", start)

    notes: list[tuple[int, int, int, int]] = []
    tempos: list[tuple[int, int]] = []
    timesig = None
    last_tick = 0
    pos = end
    for _ in range(n_tracks):
        tag, t_start, t_end = _read_chunk(data, pos)
        pos = t_end
        if tag != b"MTrk":
            continue
        for tick, kind, payload in _parse_track(data, t_start, t_end):
            last_tick = max(last_tick, tick)
            if kind == "note":
                notes.append((tick, *payload))
            elif kind == "tempo":
                tempos.append((tick, payload))
            elif kind == "timesig" and timesig is None:
                timesig = payload

    clock = _TickClock(division, tempos)
    events = []
    unmapped = 0
    for tick, ch, pitch, velocity in notes:
        if channel is not None and ch != channel:
            continue
        group = map_pitch_to_group(pitch)
        if group is None:
            unmapped += 1
            continue
        events.append(DrumEvent(clock.seconds(tick), group, velocity))
    if unmapped:
        logger.warning("skipped %d notes with unmapped pitches", unmapped)
    events.sort(key=lambda e: (e.onset_time, e.group))

    tempos.sort()
    bpm = 60e6 / tempos[0][1] if tempos else DEFAULT_BPM
    changes = [(clock.seconds(t), 60e6 / us) for t, us in tempos[1:]]
    tempo = TempoMap(bpm, tuple(timesig) if timesig else (4, 4), changes)
    return ParsedMidi(events, tempo, unmapped, clock.seconds(last_tick))


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_smf(
    events: Sequence[DrumEvent],
    bpm: float = DEFAULT_BPM,
    ppq: int = 480,
    length_seconds: float | None = None,
    channel: int = 9,
) -> bytes:
    """Encode events as a type-0 SMF on one channel (drums on 9 by default)."""
    ticks_per_second = ppq * bpm / 60.0
    msgs = []
    for ev in events:
        tick = int(round(ev.onset_time * ticks_per_second))
        pitch = GROUP_PITCH[DrumGroup(ev.group)]
        msgs.append((tick, 1, bytes([0x90 | channel, pitch, ev.velocity])))
        msgs.append((tick + ppq // 16, 0, bytes([0x80 | channel, pitch, 0])))
    msgs.sort(key=lambda m: (m[0], m[1]))
    us = int(round(60e6 / bpm))
    body = bytearray(b"\x00\xff\x51\x03" + us.to_bytes(3, "big"))
    body += b"\x00\xff\x58\x04\x04\x02\x18\x08"
    last = 0
    for tick, _, msg in msgs:
        body += _varlen(tick - last) + msg
        last = tick
    end_tick = last
    if length_seconds is not None:
        end_tick = max(last, int(round(length_seconds * ticks_per_second)))
    body += _varlen(end_tick - last) + b"\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ppq)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


# --------------------------------------------------------------------------
# Quantization


class BinarizeResult(NamedTuple):
    grid: BinarizedGrid
    dropped: int


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def binarize_counted(
    events: Sequence[DrumEvent], tempo: TempoMap | float, resolution: int, bars: int
) -> BinarizeResult:
    bpm = tempo.bpm if isinstance(tempo, TempoMap) else float(tempo)
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    if bars < 1:
        raise ValueError("bars must be >= 1")
    n = grid_length(bars, resolution)
    dt = step_seconds(bpm, resolution)
    steps = np.zeros((n, N_COLUMNS), dtype=np.uint8)
    dropped = 0
    for ev in events:
        s = round_half_away(ev.onset_time / dt)
        if not 0 <= s < n:
            dropped += 1
            continue
        steps[s, int(ev.group)] = 1
        steps[s, ONSET_COLUMN] = 1
    return BinarizeResult(BinarizedGrid(steps, resolution, bpm, bars), dropped)


def binarize(
    events: Sequence[DrumEvent], tempo: TempoMap | float, resolution: int, bars: int
) -> BinarizedGrid:
    """Quantize events to the nearest grid step (ties round away from zero).

    Events landing outside the segment are dropped; use
    :func:`binarize_counted` to get the count.
    """
    return binarize_counted(events, tempo, resolution, bars).grid


def project(grid: BinarizedGrid, mode: Projection | str) -> np.ndarray:
    mode = Projection(mode)
    out = grid.steps.copy()
    if mode is Projection.TAP:
        out[:, :N_GROUPS] = 0
    return out


def project_grid(grid: BinarizedGrid, mode: Projection | str) -> BinarizedGrid:
    return grid.with_steps(project(grid, mode))


def dequantize(grid: BinarizedGrid) -> list[DrumEvent]:
    dt = grid.step_seconds
    rows, cols = np.nonzero(grid.steps[:, :N_GROUPS])
    return [DrumEvent(r * dt, DrumGroup(c), 100) for r, c in zip(rows.tolist(), cols.tolist())]


def onset_times(grid: BinarizedGrid) -> np.ndarray:
    """Times of steps with any hit (column 9 set)."""
    return np.nonzero(grid.steps[:, ONSET_COLUMN])[0] * grid.step_seconds


# --------------------------------------------------------------------------
# Serialization


def grid_to_json(grid: BinarizedGrid) -> str:
    return json.dumps(
        {
            "bpm": grid.bpm,
            "resolution": grid.resolution,
            "bars": grid.bars,
            "steps": grid.steps.astype(int).tolist(),
        }
    )


def grid_from_json(text: str | dict) -> BinarizedGrid:
    obj = json.loads(text) if isinstance(text, str) else text
    return BinarizedGrid(
        np.asarray(obj["steps"], dtype=np.uint8).reshape(-1, N_COLUMNS),
        int(obj["resolution"]),
        float(obj["bpm"]),
        int(obj["bars"]),
    )


def grid_to_bytes(grid: BinarizedGrid) -> bytes:
    weights = 1 << np.arange(N_COLUMNS, dtype=np.uint16)
    masks = (grid.steps.astype(np.uint16) * weights).sum(axis=1).astype("<u2")
    header = GRID_MAGIC + struct.pack(
        "<BBHdI", GRID_FORMAT_VERSION, grid.resolution, grid.bars, grid.bpm, grid.n_steps
    )
    return header + masks.tobytes()


def grid_from_bytes(data: bytes) -> BinarizedGrid:
    if data[:4] != GRID_MAGIC:
        raise ValueError("not a binary grid (bad magic)")
    version, resolution, bars, bpm, n = struct.unpack("<BBHdI", data[4:20])
    if version != GRID_FORMAT_VERSION:
        raise ValueError(f"unsupported grid format version {version}")
    if len(data) != 20 + 2 * n:
        raise ValueError(f"expected {20 + 2 * n} bytes, got {len(data)}")
    masks = np.frombuffer(data[20:], dtype="<u2")
    steps = ((masks[:, None] >> np.arange(N_COLUMNS)) & 1).astype(np.uint8)
    return BinarizedGrid(steps, resolution, bpm, bars)
