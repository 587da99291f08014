import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midi2drum.align import AlignmentSpec, align_content, alignment_indices
from midi2drum.midi_core import RESOLUTIONS, grid_length, step_seconds
from midi2drum.signals import FRAME_SECONDS, frames_for_duration


def argmin_oracle(spec):
    """Exhaustive search over every step; np.argmin keeps the first (smallest) index on ties."""
    frame_t = np.arange(spec.n_frames) * spec.frame_seconds
    dist = np.abs(frame_t[:, None] - np.arange(spec.n_steps)[None, :] * spec.step_seconds)
    return dist.argmin(axis=1)


def test_worked_example_120bpm_16th():
    spec = AlignmentSpec(step_seconds(120, 16), FRAME_SECONDS, frames_for_duration(4.0), 32)
    idx = alignment_indices(spec)
    assert idx[:4].tolist() == [0, 0, 1, 1]
    assert spec.n_frames == 86


def test_tie_goes_to_smaller_step():
    spec = AlignmentSpec(step_seconds=2.0, frame_seconds=1.0, n_frames=4, n_steps=3)
    assert alignment_indices(spec).tolist() == [0, 0, 1, 1]


def test_single_step_broadcasts():
    spec = AlignmentSpec(0.5, FRAME_SECONDS, 10, 1)
    out = align_content(np.array([[3.0, 4.0]]), spec)
    assert out.shape == (10, 2) and (out == [3.0, 4.0]).all()


def test_errors():
    with pytest.raises(ValueError):
        AlignmentSpec(0.1, FRAME_SECONDS, 5, 0)
    with pytest.raises(ValueError):
        AlignmentSpec(0.0, FRAME_SECONDS, 5, 3)
    spec = AlignmentSpec(0.1, FRAME_SECONDS, 5, 3)
    with pytest.raises(ValueError):
        align_content(np.zeros((4, 2)), spec)


def test_copies_rows_exactly():
    spec = AlignmentSpec(step_seconds(97.0, 32), FRAME_SECONDS, frames_for_duration(8 * 60 / 97.0), 64)
    feats = np.random.default_rng(0).normal(size=(64, 5))
    out = align_content(feats, spec)
    np.testing.assert_array_equal(out, feats[argmin_oracle(spec)])


@settings(max_examples=200, deadline=None)
@given(st.floats(40, 240), st.sampled_from(RESOLUTIONS), st.integers(1, 4), st.integers(-3, 3))
def test_matches_oracle_and_is_monotone(bpm, res, bars, extra):
    n_steps = grid_length(bars, res)
    n_frames = max(1, frames_for_duration(bars * 4 * 60 / bpm) + extra)
    spec = AlignmentSpec(step_seconds(bpm, res), FRAME_SECONDS, n_frames, n_steps)
    idx = alignment_indices(spec)
    np.testing.assert_array_equal(idx, argmin_oracle(spec))
    assert (np.diff(idx) >= 0).all()
    assert idx[0] == 0 and idx.max() < n_steps
