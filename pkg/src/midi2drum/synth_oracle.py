"""Deterministic synthetic drum kits and the 64-band pseudo-latent.

A kit assigns every drum group a centre frequency, decay, noise mix and
gain.  A hit is an exponentially decaying blend of a cosine at the centre
frequency and band-passed noise, peaking at its first sample; grids render
as sums of hits followed by tanh soft clipping.  ``pseudo_latent`` stands in for an audio VAE: per
2048-sample frame, 64 mel-spaced triangular band energies in dB (floored at
-80 dB), mapped to latent units by ``dB / 40 + 1``.
"""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

from .midi_core import BinarizedGrid, DrumGroup, dequantize
from .signals import FLOOR_DB, HOP, LATENT_DIM, SAMPLE_RATE, LatentSeq, Waveform

F_MIN = 20.0
F_MAX = 16000.0

# (centre Hz range, decay s range, noise-mix range, gain range) per group
_GROUP_RANGES = {
    DrumGroup.KICK: ((45, 70), (0.10, 0.18), (0.0, 0.15), (0.8, 1.0)),
    DrumGroup.SNARE: ((160, 260), (0.07, 0.14), (0.5, 0.8), (0.6, 0.8)),
    DrumGroup.HIHAT_CLOSED: ((6000, 9000), (0.02, 0.05), (0.85, 1.0), (0.3, 0.5)),
    DrumGroup.HIHAT_OPEN: ((5000, 8000), (0.10, 0.18), (0.85, 1.0), (0.3, 0.5)),
    DrumGroup.TOM_LOW: ((80, 110), (0.10, 0.18), (0.1, 0.3), (0.6, 0.8)),
    DrumGroup.TOM_MID: ((120, 160), (0.09, 0.15), (0.1, 0.3), (0.6, 0.8)),
    DrumGroup.TOM_HIGH: ((170, 230), (0.08, 0.14), (0.1, 0.3), (0.6, 0.8)),
    DrumGroup.CRASH: ((3000, 5000), (0.20, 0.30), (0.9, 1.0), (0.3, 0.5)),
    DrumGroup.RIDE: ((2500, 4000), (0.12, 0.22), (0.6, 0.9), (0.3, 0.5)),
}


@dataclass(frozen=True)
class HitParams:
    center_freq: float
    decay: float
    noise_mix: float
    gain: float

    def __post_init__(self):
        if not self.decay > 0:
            raise ValueError("decay must be positive")
        if not 0.0 <= self.noise_mix <= 1.0 or not 0.0 <= self.gain <= 1.0:
            raise ValueError("noise_mix and gain must lie in [0, 1]")


@dataclass(frozen=True)
class KitTimbre:
    kit_id: str
    seed: int
    groups: tuple[HitParams, ...]

    def __post_init__(self):
        if len(self.groups) != len(DrumGroup):
            raise ValueError("a kit needs parameters for all nine groups")

    def __getitem__(self, group: DrumGroup) -> HitParams:
        return self.groups[int(group)]

    @property
    def tail_seconds(self) -> float:
        return max(p.decay for p in self.groups) * 3.0

    def to_json(self) -> dict:
        return {
            "kit_id": self.kit_id,
            "seed": self.seed,
            "groups": {
                g.name: {
                    "center_freq": p.center_freq,
                    "decay": p.decay,
                    "noise_mix": p.noise_mix,
                    "gain": p.gain,
                }
                for g, p in zip(DrumGroup, self.groups)
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KitTimbre":
        groups = tuple(HitParams(**obj["groups"][g.name]) for g in DrumGroup)
        return cls(obj["kit_id"], int(obj["seed"]), groups)


def make_kit(kit_id: str, seed: int) -> KitTimbre:
    rng = np.random.default_rng(seed)
    groups = []
    for g in DrumGroup:
        (f0, f1), (d0, d1), (n0, n1), (a0, a1) = _GROUP_RANGES[g]
        groups.append(
            HitParams(
                center_freq=float(np.exp(rng.uniform(np.log(f0), np.log(f1)))),
                decay=float(rng.uniform(d0, d1)),
                noise_mix=float(rng.uniform(n0, n1)),
                gain=float(rng.uniform(a0, a1)),
            )
        )
    return KitTimbre(kit_id, seed, tuple(groups))


def save_kits(path: str | Path, kits: list[KitTimbre]) -> None:
    Path(path).write_text(json.dumps([k.to_json() for k in kits], indent=1, sort_keys=True) + "\n")


def load_kits(path: str | Path) -> list[KitTimbre]:
    return [KitTimbre.from_json(o) for o in json.loads(Path(path).read_text())]


def _hit_seed(kit: KitTimbre, group: DrumGroup) -> int:
    return int.from_bytes(f"{kit.kit_id}/{kit.seed}/{int(group)}".encode(), "little") % (2**63)


@lru_cache(maxsize=512)
def _hit_cached(kit: KitTimbre, group: DrumGroup) -> np.ndarray:
    p = kit[group]
    n = math.ceil(p.decay * 3 * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    env = np.exp(-t / p.decay)
    tone = np.cos(2 * np.pi * p.center_freq * t)
    rng = np.random.default_rng(_hit_seed(kit, group))
    noise = rng.standard_normal(n)
    lo = max(p.center_freq / 2, 30.0)
    hi = min(p.center_freq * 2, 0.45 * SAMPLE_RATE)
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    noise = signal.sosfilt(sos, noise)
    # rotate the noise so its largest sample (made +1) starts the hit; with the
    # cosine tone this puts the waveform peak at sample 0 under the envelope
    j = int(np.argmax(np.abs(noise)))
    noise = np.roll(noise, -j) / noise[j]
    # raised-cosine fade over the last 20% so the truncation does not click
    m = n // 5
    env[n - m :] *= 0.5 + 0.5 * np.cos(np.linspace(0.0, np.pi, m))
    out = p.gain * env * ((1.0 - p.noise_mix) * tone + p.noise_mix * noise)
    out.setflags(write=False)
    return out


def render_hit(group: DrumGroup, kit: KitTimbre) -> Waveform:
    return Waveform(_hit_cached(kit, DrumGroup(group)).copy())


def render_events(events, duration: float, kit: KitTimbre) -> Waveform:
    """Sum of hits at the event onsets over ``duration`` plus the kit's release tail."""
    n = int(round(duration * SAMPLE_RATE)) + math.ceil(kit.tail_seconds * SAMPLE_RATE)
    out = np.zeros(n)
    for ev in events:
        hit = _hit_cached(kit, DrumGroup(ev.group))
        start = int(round(ev.onset_time * SAMPLE_RATE))
        if start >= n:
            continue
        m = min(len(hit), n - start)
        out[start : start + m] += hit[:m]
    return Waveform(np.tanh(out))


def render_grid(grid: BinarizedGrid, kit: KitTimbre) -> Waveform:
    return render_events(dequantize(grid), grid.duration, kit)


@lru_cache(maxsize=8)
def mel_filterbank(n_bands: int = LATENT_DIM, n_fft: int = HOP, sr: int = SAMPLE_RATE,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Triangular filters, mel-spaced, unit peak; shape (n_bands, n_fft // 2 + 1)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_bands + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lower) / (centre - lower)
    down = (upper - freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(up, down))
    # bands narrower than a bin still get the nearest bin
    empty = fb.sum(axis=1) == 0
    if empty.any():
        nearest = np.abs(freqs[None, :] - centre[empty]).argmin(axis=1)
        fb[np.nonzero(empty)[0], nearest] = 1.0
    fb.setflags(write=False)
    return fb


def band_energies_db(wave: Waveform) -> np.ndarray:
    """(N, 64) band energies in dBFS, N = floor(len / 2048), floored at -80 dB."""
    x = wave.samples
    n = len(x) // HOP
    if n == 0:
        return np.zeros((0, LATENT_DIM))
    frames = x[: n * HOP].reshape(n, HOP)
    win = np.hamming(HOP)
    spec = np.abs(np.fft.rfft(frames * win, axis=1)) ** 2
    # a full-scale sine peaks at 0 dB
    spec /= (win.sum() / 2.0) ** 2
    energy = spec @ mel_filterbank().T
    return np.maximum(10.0 * np.log10(np.maximum(energy, 1e-30)), FLOOR_DB)


def pseudo_latent(wave: Waveform) -> LatentSeq:
    if len(wave) == 0:
        raise ValueError("empty waveform")
    if len(wave) < HOP:
        raise ValueError(f"waveform shorter than one {HOP}-sample frame")
    return LatentSeq(band_energies_db(wave) / 40.0 + 1.0)


def write_wav(path: str | Path, wave_: Waveform, float32: bool = False) -> None:
    """Stereo-duplicated WAV, 16-bit PCM or 32-bit IEEE float."""
    x = np.clip(wave_.samples, -1.0, 1.0)
    stereo = np.repeat(x[:, None], 2, axis=1)
    if not float32:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(wave_.sample_rate)
            fh.writeframes((stereo * 32767).round().astype("<i2").tobytes())
        return
    data = stereo.astype("<f4").tobytes()
    # the stdlib wave module only writes PCM, so build the float header by hand
    fmt = (b"fmt " + (16).to_bytes(4, "little") + (3).to_bytes(2, "little") + (2).to_bytes(2, "little")
           + wave_.sample_rate.to_bytes(4, "little") + (wave_.sample_rate * 8).to_bytes(4, "little")
           + (8).to_bytes(2, "little") + (32).to_bytes(2, "little"))
    body = b"WAVE" + fmt + b"data" + len(data).to_bytes(4, "little") + data
    Path(path).write_bytes(b"RIFF" + len(body).to_bytes(4, "little") + body)


def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM or 32-bit float WAV, mixing channels down to mono."""
    raw = Path(path).read_bytes()
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(raw):
        tag, size = raw[pos : pos + 4], int.from_bytes(raw[pos + 4 : pos + 8], "little")
        chunk = raw[pos + 8 : pos + 8 + size]
        if tag == b"fmt ":
            fmt = (
                int.from_bytes(chunk[0:2], "little"),
                int.from_bytes(chunk[2:4], "little"),
                int.from_bytes(chunk[4:8], "little"),
                int.from_bytes(chunk[14:16], "little"),
            )
        elif tag == b"data":
            if fmt is None:
                raise ValueError(f"{path}: data chunk before fmt chunk")
            code, channels, sr, bits = fmt
            if code == 3 and bits == 32:
                x = np.frombuffer(chunk, "<f4").astype(np.float64)
            elif code == 1 and bits == 16:
                x = np.frombuffer(chunk, "<i2") / 32768.0
            else:
                raise ValueError(f"{path}: unsupported WAV encoding (format {code}, {bits} bits)")
            return Waveform(x.reshape(-1, channels).mean(axis=1), sr)
        pos += 8 + size + (size & 1)
    raise ValueError(f"{path}: no data chunk")
