"""Rhythm-centric evaluation on waveforms or pseudo-latent sequences.

Onsets come from a half-wave-rectified novelty curve (spectral flux of a
log-mel spectrogram for audio, frame-energy increase for latents) followed
by local-maximum / moving-mean peak picking.  Beats come from an
Ellis-style dynamic-programming tracker on the same novelty curve.
Continuity scores follow the usual CMLt/AMLt definitions: a reference beat
counts when the nearest estimate is within 17.5% of the inter-beat interval
and the estimated interval agrees with the reference interval within 17.5%.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .signals import FLOOR_DB, HOP, LATENT_FLOOR, SAMPLE_RATE, LatentSeq, Waveform
from .synth_oracle import mel_filterbank

ONSET_TOLERANCE = 0.100
N_FFT = 2048
ONSET_HOP = 512
RMS_WINDOW = 2048
RMS_HOP = 512
CONTINUITY_THRESHOLD = 0.175


@dataclass(frozen=True)
class PeakParams:
    """Peak-picking windows in seconds; delta applies to the max-normalized curve."""

    pre_max: float = 0.03
    post_max: float = 0.03
    pre_avg: float = 0.10
    post_avg: float = 0.10
    delta: float = 0.07
    wait: float = 0.03


WAVE_PEAKS = PeakParams()
LATENT_PEAKS = PeakParams(pre_max=0.05, post_max=0.05, pre_avg=0.10, post_avg=0.10, delta=0.1, wait=0.05)


# --------------------------------------------------------------------------
# Novelty and onsets


def _mel_db(wave: Waveform) -> np.ndarray:
    """Centred log-mel power frames (n_frames, 64), at most 60 dB below the peak."""
    x = np.pad(wave.samples, (N_FFT // 2, N_FFT // 2))
    n = 1 + (len(x) - N_FFT) // ONSET_HOP
    idx = np.arange(N_FFT)[None, :] + ONSET_HOP * np.arange(n)[:, None]
    spec = np.abs(np.fft.rfft(x[idx] * np.hanning(N_FFT), axis=1)) ** 2
    mel = spec @ mel_filterbank(n_fft=N_FFT, sr=wave.sample_rate).T
    db = 10.0 * np.log10(np.maximum(mel, 1e-10))
    return np.maximum(db, db.max() - 60.0)


def novelty(sig: Waveform | LatentSeq) -> tuple[np.ndarray, float]:
    """Onset-strength curve and its frame rate (frames per second).

    The frame before the signal is treated as silence, so a hit in the first
    frame still produces novelty.
    """
    if isinstance(sig, LatentSeq):
        if len(sig) == 0:
            raise ValueError("empty latent sequence")
        # L2 norm of linear band amplitudes, in dB: loud bands dominate, so
        # window leakage near the floor does not register as onsets
        amp = 10.0 ** ((np.maximum(sig.frames, LATENT_FLOOR) - 1.0) * 2.0)
        floor_norm = np.sqrt(amp.shape[1]) * 10.0 ** (FLOOR_DB / 20.0)
        energy = 20.0 * np.log10(np.linalg.norm(amp, axis=1) / floor_norm)
        nov = np.maximum(0.0, np.diff(energy, prepend=0.0))
        return nov, 1.0 / sig.frame_seconds
    if len(sig) == 0:
        raise ValueError("empty waveform")
    db = _mel_db(sig)
    prev = np.vstack([np.full((1, db.shape[1]), db.min()), db[:-1]])
    nov = np.maximum(0.0, db - prev).mean(axis=1)
    return nov, sig.sample_rate / ONSET_HOP


def _frame_time_offset(sig) -> float:
    # latent frame k covers [k, k+1) frames: report its centre; audio frames are centred already
    return 0.5 if isinstance(sig, LatentSeq) else 0.0


def peak_pick(env: np.ndarray, rate: float, params: PeakParams) -> np.ndarray:
    """Indices of local maxima above a moving-mean threshold, at least ``wait`` apart."""
    peak = env.max() if env.size else 0.0
    if peak <= 1e-9:
        return np.zeros(0, dtype=np.int64)
    x = env / peak
    pre_max = max(1, int(round(params.pre_max * rate)))
    post_max = max(1, int(round(params.post_max * rate)))
    pre_avg = max(1, int(round(params.pre_avg * rate)))
    post_avg = max(1, int(round(params.post_avg * rate)))
    wait = max(0, int(round(params.wait * rate)))
    n = len(x)
    peaks = []
    last = -np.inf
    for k in range(n):
        lo, hi = max(0, k - pre_max), min(n, k + post_max + 1)
        if x[k] < x[lo:hi].max() or x[k] <= 0:
            continue
        lo, hi = max(0, k - pre_avg), min(n, k + post_avg + 1)
        if x[k] < x[lo:hi].mean() + params.delta:
            continue
        if k - last <= wait:
            continue
        peaks.append(k)
        last = k
    return np.asarray(peaks, dtype=np.int64)


def detect_onsets(sig: Waveform | LatentSeq, params: PeakParams | None = None) -> np.ndarray:
    """Onset times in seconds, strictly increasing.  Silence gives an empty array."""
    env, rate = novelty(sig)
    if params is None:
        params = LATENT_PEAKS if isinstance(sig, LatentSeq) else WAVE_PEAKS
    frames = peak_pick(env, rate, params)
    return (frames + _frame_time_offset(sig)) / rate


# --------------------------------------------------------------------------
# Onset F1


def match_onsets(est, ref, tolerance: float = ONSET_TOLERANCE) -> int:
    """Size of a maximum matching with |est_i - ref_j| <= tolerance.

    On a line the compatibility sets are intervals, so matching each
    estimate (in time order) to the earliest still-free compatible reference
    is optimal.
    """
    est = np.sort(np.asarray(est, dtype=np.float64))
    ref = np.sort(np.asarray(ref, dtype=np.float64))
    j = 0
    matches = 0
    for e in est:
        while j < len(ref) and ref[j] < e - tolerance:
            j += 1
        if j < len(ref) and abs(ref[j] - e) <= tolerance:
            matches += 1
            j += 1
    return matches


def onset_f1(est, ref, tolerance: float = ONSET_TOLERANCE) -> tuple[float, float, float]:
    """(precision, recall, f1).  Both lists empty counts as a perfect score."""
    n_est, n_ref = len(est), len(ref)
    if n_est == 0 and n_ref == 0:
        return 1.0, 1.0, 1.0
    m = match_onsets(est, ref, tolerance)
    precision = m / n_est if n_est else 0.0
    recall = m / n_ref if n_ref else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


# --------------------------------------------------------------------------
# RMS envelope error


# the pseudo-latent's Hamming window spreads a tone over ~1.36 bins of power
_LATENT_ENBW = float(HOP * np.sum(np.hamming(HOP) ** 2) / np.sum(np.hamming(HOP)) ** 2)


def rms_envelope_db(sig: Waveform | LatentSeq, n_samples: int | None = None) -> np.ndarray:
    """Frame RMS in dBFS, floored at -80 dB.

    Waveforms: rectangular 2048-sample frames, hop 512.  Latents: per-frame
    power summed over the 64 bands (a full-scale sine reads -3 dBFS, as its
    RMS does).
    """
    if isinstance(sig, LatentSeq):
        band_db = (sig.frames - 1.0) * 40.0
        power = np.sum(10.0 ** (band_db / 10.0), axis=1) * (0.5 / _LATENT_ENBW)
        return np.maximum(10.0 * np.log10(np.maximum(power, 1e-30)), FLOOR_DB)
    x = sig.samples
    n = max(len(x), RMS_WINDOW) if n_samples is None else n_samples
    x = np.pad(x, (0, n - len(x)))
    count = 1 + (n - RMS_WINDOW) // RMS_HOP
    idx = np.arange(RMS_WINDOW)[None, :] + RMS_HOP * np.arange(count)[:, None]
    rms = np.sqrt(np.mean(x[idx] ** 2, axis=1))
    return np.maximum(20.0 * np.log10(np.maximum(rms, 1e-30)), FLOOR_DB)


def rms_error_db(est: Waveform | LatentSeq, ref: Waveform | LatentSeq) -> float:
    """Mean absolute difference of the two dBFS envelopes (shorter input zero padded)."""
    if type(est) is not type(ref):
        raise TypeError("rms_error_db needs two waveforms or two latent sequences")
    if isinstance(est, Waveform):
        if est.sample_rate != ref.sample_rate:
            raise ValueError("sample rates differ")
        n = max(len(est), len(ref), RMS_WINDOW)
        a, b = rms_envelope_db(est, n), rms_envelope_db(ref, n)
    else:
        a, b = rms_envelope_db(est), rms_envelope_db(ref)
        n = max(len(a), len(b))
        a = np.pad(a, (0, n - len(a)), constant_values=FLOOR_DB)
        b = np.pad(b, (0, n - len(b)), constant_values=FLOOR_DB)
    return float(np.mean(np.abs(a - b)))


# --------------------------------------------------------------------------
# Beat tracking


def estimate_tempo(
    env: np.ndarray,
    rate: float,
    min_bpm: float = 60.0,
    max_bpm: float = 200.0,
    prior_bpm: float = 120.0,
    prior_octaves: float = 1.0,
) -> float:
    """Tempo (BPM) maximizing the unbiased autocorrelation inside [min_bpm, max_bpm].

    The autocorrelation is weighted by a log-normal prior around ``prior_bpm``
    so that a strong half-tempo periodicity does not win by a hair.
    """
    x = env - env.mean()
    n = len(x)
    lo = int(np.ceil(rate * 60.0 / max_bpm))
    hi = min(int(np.floor(rate * 60.0 / min_bpm)), n - 1)
    if hi < lo or not np.any(x):
        return 0.0
    lags = np.arange(lo, hi + 1)
    ac = np.array([np.dot(x[: n - lag], x[lag:]) / (n - lag) for lag in lags])
    bpms = 60.0 * rate / lags
    ac = ac * np.exp(-0.5 * (np.log2(bpms / prior_bpm) / prior_octaves) ** 2)
    return 60.0 * rate / lags[int(np.argmax(ac))]


def _beat_dp(local: np.ndarray, period: float, tightness: float):
    n = len(local)
    backlink = np.full(n, -1, dtype=np.int64)
    cumscore = np.zeros(n)
    thresh = 0.01 * local.max()
    first = True
    lo_off, hi_off = int(round(period / 2)), int(round(2 * period))
    for i in range(n):
        best, where = -np.inf, -1
        for loc in range(i - lo_off, i - hi_off - 1, -1):
            if loc < 0:
                break
            score = cumscore[loc] - tightness * (np.log(i - loc) - np.log(period)) ** 2
            if score > best:
                best, where = score, loc
        cumscore[i] = local[i] + (best if where >= 0 else 0.0)
        if first and local[i] < thresh:
            backlink[i] = -1
        else:
            backlink[i] = where
            first = False
    return backlink, cumscore


def beats_from_novelty(env: np.ndarray, rate: float, tightness: float = 100.0) -> np.ndarray:
    """Beat frame indices from an onset-strength curve."""
    if env.size < 3 or env.max() <= 1e-9:
        return np.zeros(0, dtype=np.int64)
    bpm = estimate_tempo(env, rate)
    if bpm <= 0:
        return np.zeros(0, dtype=np.int64)
    period = rate * 60.0 / bpm
    norm = env / (env.std(ddof=1) + 1e-12)
    half = int(round(period))
    window = np.exp(-0.5 * (np.arange(-half, half + 1) * 32.0 / period) ** 2)
    local = np.convolve(norm, window, mode="same")
    backlink, cumscore = _beat_dp(local, period, tightness)

    is_max = np.zeros(len(cumscore), dtype=bool)
    is_max[1:-1] = (cumscore[1:-1] > cumscore[:-2]) & (cumscore[1:-1] >= cumscore[2:])
    if len(cumscore) > 1:
        is_max[-1] = cumscore[-1] > cumscore[-2]
    if not is_max.any():
        return np.zeros(0, dtype=np.int64)
    thresh = 0.5 * np.median(cumscore[is_max])
    tail = int(np.nonzero(is_max & (cumscore >= thresh))[0][-1])

    beats = []
    k = tail
    while k >= 0:
        beats.append(k)
        k = backlink[k]
    beats = np.array(beats[::-1], dtype=np.int64)

    # trim weak leading/trailing beats
    smooth = np.convolve(local[beats], np.hanning(5), mode="same")
    thresh = 0.5 * np.sqrt(np.mean(smooth**2))
    keep = np.nonzero(local[beats] > thresh)[0]
    if keep.size == 0:
        return np.zeros(0, dtype=np.int64)
    return beats[keep[0] : keep[-1] + 1]


def track_beats(sig: Waveform | LatentSeq, tightness: float = 100.0) -> np.ndarray:
    """Beat times in seconds; silence gives an empty array."""
    env, rate = novelty(sig)
    return (beats_from_novelty(env, rate, tightness) + _frame_time_offset(sig)) / rate


# --------------------------------------------------------------------------
# Continuity metrics


def _continuity_scores(ref: np.ndarray, est: np.ndarray, phase_thr: float, period_thr: float) -> float:
    """Total fraction of correct beats (the 't' variant) for one reference variation."""
    n_ref = len(ref)
    if n_ref < 2:
        return 0.0
    ok = np.zeros(n_ref, dtype=bool)
    for m in range(n_ref):
        ref_interval = ref[1] - ref[0] if m == 0 else ref[m] - ref[m - 1]
        diffs = np.abs(ref[m] - est)
        nearest = int(np.argmin(diffs))
        if diffs[nearest] >= phase_thr * ref_interval:
            continue
        est_interval = est[1] - est[0] if nearest == 0 else est[nearest] - est[nearest - 1]
        if abs(1.0 - est_interval / ref_interval) < period_thr:
            ok[m] = True
    return float(ok.sum()) / max(n_ref, len(est))


def continuity_metrics(
    est_beats,
    ref_beats,
    phase_threshold: float = CONTINUITY_THRESHOLD,
    period_threshold: float = CONTINUITY_THRESHOLD,
) -> tuple[float, float]:
    """(CMLt, AMLt).  Fewer than two beats on either side scores (0, 0).

    AMLt takes the best of the reference at the annotated level, double
    tempo, off-beat, and the two half-tempo phases.
    """
    est = np.sort(np.asarray(est_beats, dtype=np.float64))
    ref = np.sort(np.asarray(ref_beats, dtype=np.float64))
    if len(est) < 2 or len(ref) < 2:
        return 0.0, 0.0
    double = np.empty(2 * len(ref) - 1)
    double[0::2] = ref
    double[1::2] = 0.5 * (ref[:-1] + ref[1:])
    variations = [ref, double[1::2], double, ref[0::2], ref[1::2]]
    scores = [_continuity_scores(v, est, phase_threshold, period_threshold) for v in variations]
    return scores[0], max(scores)


# --------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    f1: float
    precision: float
    recall: float
    rms_error_db: float
    cmlt: float
    amlt: float
    counts: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("f1", "precision", "recall", "cmlt", "amlt"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.rms_error_db < 0:
            raise ValueError("rms_error_db must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    est: Waveform | LatentSeq,
    ref: Waveform | LatentSeq,
    ref_onsets: np.ndarray | None = None,
    tolerance: float = ONSET_TOLERANCE,
) -> MetricsReport:
    """Compare a generated signal with its ground truth.

    ``ref_onsets`` overrides detected reference onsets (e.g. the known onset
    times of a target grid).
    """
    est_on = detect_onsets(est)
    ref_on = detect_onsets(ref) if ref_onsets is None else np.asarray(ref_onsets, dtype=np.float64)
    p, r, f = onset_f1(est_on, ref_on, tolerance)
    est_beats, ref_beats = track_beats(est), track_beats(ref)
    cmlt, amlt = continuity_metrics(est_beats, ref_beats)
    return MetricsReport(
        f1=f,
        precision=p,
        recall=r,
        rms_error_db=rms_error_db(est, ref),
        cmlt=cmlt,
        amlt=amlt,
        counts={
            "est_onsets": int(len(est_on)),
            "ref_onsets": int(len(ref_on)),
            "est_beats": int(len(est_beats)),
            "ref_beats": int(len(ref_beats)),
        },
        params={"tolerance": tolerance, "domain": "latent" if isinstance(est, LatentSeq) else "waveform"},
    )


TABLE_COLUMNS = ("f1", "rms_error_db", "cmlt", "amlt")


def aggregate(reports: list[MetricsReport]) -> dict:
    """Means over reports in the Alignment / Beat Continuity column order."""
    if not reports:
        return {k: float("nan") for k in TABLE_COLUMNS} | {"n": 0}
    out = {k: float(np.mean([getattr(r, k) for r in reports])) for k in TABLE_COLUMNS}
    out["n"] = len(reports)
    return out


__all__ = [
    "SAMPLE_RATE",
    "MetricsReport",
    "aggregate",
    "continuity_metrics",
    "detect_onsets",
    "evaluate",
    "onset_f1",
    "rms_error_db",
    "track_beats",
]
