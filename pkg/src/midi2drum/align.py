"""Content aligner: copy grid-step feature rows onto the latent-frame timeline.

Frame ``k`` sits at ``k * frame_seconds`` and step ``s`` at ``s * step_seconds``.
Each frame takes the row of the step nearest in time; ties go to the smaller
step.  No interpolation, no learned parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signals import FRAME_SECONDS

__all__ = ["FRAME_SECONDS", "AlignmentSpec", "align_content", "alignment_indices"]


@dataclass(frozen=True)
class AlignmentSpec:
    step_seconds: float
    frame_seconds: float
    n_frames: int
    n_steps: int

    def __post_init__(self):
        if not (self.step_seconds > 0 and self.frame_seconds > 0):
            raise ValueError("step and frame durations must be positive")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1 (empty content)")


def alignment_indices(spec: AlignmentSpec) -> np.ndarray:
    """Source step index for every latent frame."""
    k = np.arange(spec.n_frames)
    frame_t = k * spec.frame_seconds
    base = np.floor(frame_t / spec.step_seconds).astype(np.int64)
    # floor() may be off by one in floating point, so test a 3-wide neighbourhood
    cand = np.clip(base[:, None] + np.array([-1, 0, 1]), 0, spec.n_steps - 1)
    dist = np.abs(frame_t[:, None] - cand * spec.step_seconds)
    best = dist.min(axis=1, keepdims=True)
    # smallest candidate index among the minimal distances
    cand = np.where(dist == best, cand, np.iinfo(np.int64).max)
    return cand.min(axis=1)


def align_content(features: np.ndarray, spec: AlignmentSpec) -> np.ndarray:
    features = np.asarray(features)
    if features.shape[0] == 0:
        raise ValueError("empty content features")
    if features.shape[0] != spec.n_steps:
        raise ValueError(f"features have {features.shape[0]} rows, spec expects {spec.n_steps}")
    return features[alignment_indices(spec)]
