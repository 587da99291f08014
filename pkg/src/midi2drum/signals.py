"""Waveform and latent-sequence containers shared across modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 44100
HOP = 2048
LATENT_DIM = 64
FRAME_SECONDS = HOP / SAMPLE_RATE

# Latent units: value = dB / 40 + 1, so the -80 dB floor maps to -1.
FLOOR_DB = -80.0
LATENT_FLOOR = FLOOR_DB / 40.0 + 1.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class LatentSeq:
    frames: np.ndarray
    frame_seconds: float = FRAME_SECONDS

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != LATENT_DIM:
            raise ValueError(f"latent sequence must be N x {LATENT_DIM}, got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return len(self) * self.frame_seconds


def frames_for_duration(seconds: float) -> int:
    """Latent frames covering a segment: floor(seconds * sr / hop)."""
    return int(np.floor(seconds * SAMPLE_RATE / HOP + 1e-9))
