"""Deterministic signal processing front-end.

Fixed project-wide analysis parameters: 16 kHz audio, 200-sample hop
(12.5 ms), 800-sample Hann window, 80 mel bands spanning 0-8000 Hz,
natural-log magnitudes clamped at 1e-5.  Every operation here is a pure
function of its inputs; none draws random numbers.
"""

import functools
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.signal

from .errors import InvalidInput, UndefinedSpeakerMean
from .validation import check_array_2d

SAMPLE_RATE = 16000
HOP_LENGTH = 200
WIN_LENGTH = 800
N_FFT = 800
N_MELS = 80
FMIN_HZ = 0.0
FMAX_HZ = 8000.0
LOG_FLOOR = 1e-5
N_MFCC = 13

F0_MIN_HZ = 50.0
F0_MAX_HZ = 600.0
VOICING_THRESHOLD = 0.5
# Competing autocorrelation peaks within this fraction of the best one are
# treated as equivalent and the shortest lag wins, guarding against octave
# errors toward subharmonics.
PEAK_TOLERANCE = 0.87
UNVOICED_FILL_HZ = 150.0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    hop_length: int = HOP_LENGTH
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class MfccSequence:
    frames: np.ndarray
    hop_length: int = HOP_LENGTH
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)


@dataclass
class F0Track:
    log_f0: np.ndarray
    voiced: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float64).reshape(-1)
        self.voiced = np.asarray(self.voiced, dtype=bool).reshape(-1)


def _check_clip(clip):
    if not isinstance(clip, AudioClip):
        raise InvalidInput(f"expected AudioClip, got {type(clip).__name__}")
    if clip.sample_rate != SAMPLE_RATE:
        raise InvalidInput(
            f"sample_rate must be {SAMPLE_RATE}, got {clip.sample_rate}"
        )
    if clip.samples.size < HOP_LENGTH:
        raise InvalidInput(
            f"clip must hold at least one hop ({HOP_LENGTH} samples), "
            f"got {clip.samples.size}"
        )
    if not np.all(np.isfinite(clip.samples)):
        raise InvalidInput("clip contains non-finite samples")


def n_frames_for(n_samples):
    """Frame count for a clip: T = ceil(len / hop)."""
    return -(-int(n_samples) // HOP_LENGTH)


def _analysis_window():
    # Periodic Hann; with hop = win/4 the squared-window overlap-add is flat.
    return scipy.signal.get_window("hann", WIN_LENGTH, fftbins=True)


def _frame_signal(samples):
    """Slice into T frames of WIN_LENGTH starting at multiples of the hop.

    Frame t covers samples [t*hop, t*hop + win); the tail is zero-padded so
    every frame has full length and T = ceil(len/hop) exactly.
    """
    samples = np.asarray(samples, dtype=np.float64)
    t_frames = n_frames_for(samples.size)
    padded = np.zeros((t_frames - 1) * HOP_LENGTH + WIN_LENGTH)
    padded[: samples.size] = samples
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(t_frames)[:, None]
    return padded[idx]


def stft_magnitude(samples):
    """Magnitude STFT, shape (T, N_FFT//2 + 1)."""
    frames = _frame_signal(samples) * _analysis_window()[None, :]
    return np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.cache
def mel_filterbank():
    """Triangular mel filterbank, shape (N_MELS, N_FFT//2 + 1), unit peaks."""
    n_bins = N_FFT // 2 + 1
    edges = _mel_to_hz(
        np.linspace(_hz_to_mel(FMIN_HZ), _hz_to_mel(FMAX_HZ), N_MELS + 2)
    )
    bin_hz = np.arange(n_bins) * (SAMPLE_RATE / N_FFT)
    fb = np.zeros((N_MELS, n_bins))
    for m in range(N_MELS):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (bin_hz - lo) / (center - lo)
        fall = (hi - bin_hz) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall))
    fb.setflags(write=False)
    return fb


def mel_band_centers_hz():
    """Center frequency of each mel band in Hz."""
    edges = _mel_to_hz(
        np.linspace(_hz_to_mel(FMIN_HZ), _hz_to_mel(FMAX_HZ), N_MELS + 2)
    )
    return edges[1:-1]


def mel_spectrogram(clip):
    """Log-mel magnitude spectrogram of a clip.

    Parameters
    ----------
    clip : AudioClip

    Returns
    -------
    MelSpectrogram
        T x 80 matrix, T = ceil(len/hop), every entry >= log(1e-5).
    """
    _check_clip(clip)
    mag = stft_magnitude(clip.samples)
    mel = mag @ mel_filterbank().T
    frames = np.log(np.maximum(mel, LOG_FLOOR))
    return MelSpectrogram(frames=frames, utterance_id=clip.utterance_id)


def mfcc(clip):
    """First 13 DCT-II (orthonormal) coefficients of the log-mel frames."""
    mel = mel_spectrogram(clip)
    coeffs = scipy.fft.dct(mel.frames, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    return MfccSequence(frames=coeffs, utterance_id=clip.utterance_id)


def _parabolic_refine(values, peak):
    """Offset in (-0.5, 0.5) of the vertex of the parabola through
    values[peak-1 .. peak+1]; 0 when the peak sits on an edge or the
    curvature vanishes."""
    if peak <= 0 or peak >= len(values) - 1:
        return 0.0
    a, b, c = values[peak - 1], values[peak], values[peak + 1]
    denom = a - 2.0 * b + c
    if denom >= 0.0 or not np.isfinite(denom):
        return 0.0
    offset = 0.5 * (a - c) / denom
    return float(np.clip(offset, -0.5, 0.5))


def _frame_f0(frame, lag_min, lag_max, real_len=None):
    """(f0_hz, peak_ncc) for one frame by normalized autocorrelation.

    Candidate lags are interior local maxima of the normalized
    autocorrelation within PEAK_TOLERANCE of the best, shortest first.  A
    candidate must be backed by at least two periods of real signal and
    must keep correlating at double and triple its lag: a true period
    repeats at every multiple, while formant ringing (fails x2) and
    even-harmonic half-periods (fail x3) do not.  `real_len` is the
    unpadded sample count; multiples falling into clip-end padding are
    exempt, but signal dying out mid-frame counts against the candidate.
    Returns (nan, 0) when nothing qualifies.
    """
    n = frame.size
    if real_len is None:
        real_len = n
    energy = float(np.dot(frame, frame))
    if energy < 1e-12:
        return np.nan, 0.0
    lags = np.arange(lag_min, lag_max + 1)
    ncc = np.empty(lags.size)
    # Cumulative energies give the exact normalizer for each truncated overlap.
    csum = np.concatenate(([0.0], np.cumsum(frame * frame)))
    for i, lag in enumerate(lags):
        num = float(np.dot(frame[: n - lag], frame[lag:]))
        e_head = csum[n - lag]
        e_tail = csum[n] - csum[lag]
        ncc[i] = num / np.sqrt(e_head * e_tail + 1e-12)
    interior = np.zeros(lags.size, dtype=bool)
    interior[1:-1] = (ncc[1:-1] >= ncc[:-2]) & (ncc[1:-1] >= ncc[2:])
    if not np.any(interior):
        return np.nan, 0.0
    best = float(np.max(ncc[interior]))
    candidates = np.flatnonzero(interior & (ncc >= PEAK_TOLERANCE * best))

    def _holds_at(multiple, c):
        lag = multiple * lags[c]
        center = lag - lag_min
        if center > lags.size - 1:
            return True
        if real_len - lag < 0.5 * lags[c]:
            return True  # multiple lies in clip-end padding, unverifiable
        lo = max(0, center - 3)
        return np.max(ncc[lo : center + 4]) >= 0.5 * ncc[c]

    for c in candidates:
        if 2 * lags[c] > real_len:
            continue  # under two periods of real signal
        if _holds_at(2, c) and _holds_at(3, c):
            refined = lags[c] + _parabolic_refine(ncc, int(c))
            f0 = SAMPLE_RATE / refined
            return float(np.clip(f0, F0_MIN_HZ, F0_MAX_HZ)), float(ncc[c])
    return np.nan, 0.0


def estimate_f0(clip):
    """Per-frame f0 track with voicing decisions.

    Voicing requires the best normalized-autocorrelation peak to reach 0.5.
    Unvoiced gaps in log_f0 are filled by linear interpolation between the
    nearest voiced frames, with edge frames held; a fully unvoiced clip is
    filled with log(150).

    Returns
    -------
    F0Track
        log_f0 finite everywhere, voiced a boolean mask, both length T.
    """
    _check_clip(clip)
    frames = _frame_signal(clip.samples)
    lag_min = int(np.floor(SAMPLE_RATE / F0_MAX_HZ))
    lag_max = int(np.ceil(SAMPLE_RATE / F0_MIN_HZ))
    t_frames = frames.shape[0]
    f0 = np.full(t_frames, np.nan)
    voiced = np.zeros(t_frames, dtype=bool)
    n_samples = clip.samples.size
    for t in range(t_frames):
        real_len = min(WIN_LENGTH, n_samples - t * HOP_LENGTH)
        hz, peak = _frame_f0(frames[t], lag_min, lag_max, real_len=real_len)
        if peak >= VOICING_THRESHOLD and np.isfinite(hz):
            f0[t] = hz
            voiced[t] = True
    log_f0 = np.full(t_frames, np.log(UNVOICED_FILL_HZ))
    idx = np.flatnonzero(voiced)
    if idx.size:
        log_f0 = np.interp(np.arange(t_frames), idx, np.log(f0[idx]))
    return F0Track(log_f0=log_f0, voiced=voiced, utterance_id=clip.utterance_id)


def speaker_log_f0_mean(tracks):
    """Mean voiced log-f0 over a speaker's training tracks.

    Raises UndefinedSpeakerMean when no track contributes a voiced frame.
    """
    parts = [t.log_f0[t.voiced] for t in tracks if np.any(t.voiced)]
    if not parts:
        raise UndefinedSpeakerMean(
            "speaker has no voiced frames in its training split"
        )
    return float(np.mean(np.concatenate(parts)))


def normalize_log_f0(src, src_speaker_mean, tgt_speaker_mean):
    """Shift a log-f0 track from the source speaker's mean to the target's.

    The shift is applied in the log domain so all pairwise differences (the
    contour shape) are preserved exactly; the voicing mask is untouched.
    """
    if not (np.isfinite(src_speaker_mean) and np.isfinite(tgt_speaker_mean)):
        raise UndefinedSpeakerMean("speaker log-f0 mean is not finite")
    shifted = src.log_f0 - float(src_speaker_mean) + float(tgt_speaker_mean)
    return F0Track(
        log_f0=shifted, voiced=src.voiced.copy(), utterance_id=src.utterance_id
    )


@functools.cache
def _mel_inversion_operator():
    fb = mel_filterbank()
    gram = fb.T @ fb
    step = 1.0 / np.linalg.norm(gram, 2)
    pinv_t = np.linalg.pinv(fb).T.copy()
    gram.setflags(write=False)
    pinv_t.setflags(write=False)
    return gram, step, pinv_t


def _mel_to_linear(mel_mag, n_iters=30):
    """Least-squares non-negative inversion of the mel projection.

    Projected-gradient descent on ||fb @ s - m||^2 per frame, initialized at
    the clipped pseudo-inverse solution.  Deterministic.
    """
    fb = mel_filterbank()
    gram, step, pinv_t = _mel_inversion_operator()
    s = np.clip(mel_mag @ pinv_t, 0.0, None)
    for _ in range(n_iters):
        grad = (s @ gram) - (mel_mag @ fb)
        s = np.clip(s - step * grad, 0.0, None)
    return s


def _overlap_add(frames):
    """Weighted overlap-add inverse of the framing.

    Normalized by the constant interior overlap factor sum(w^2)/hop rather
    than per-sample window sums: per-sample division blows up near the clip
    edges where the Hann window vanishes, amplifying any frame
    inconsistency.  The price is a fade over the first partial-coverage
    window, which the analysis framing tolerates.
    """
    window = _analysis_window()
    cola = float(np.sum(window * window)) / HOP_LENGTH
    t_frames = frames.shape[0]
    length = (t_frames - 1) * HOP_LENGTH + WIN_LENGTH
    acc = np.zeros(length)
    for t in range(t_frames):
        start = t * HOP_LENGTH
        acc[start : start + WIN_LENGTH] += frames[t] * window
    return acc / cola


def griffin_lim_invert(mel, iterations=60):
    """Reconstruct a waveform from a log-mel spectrogram.

    The mel frames are mapped back to a linear magnitude spectrogram by
    non-negative least squares against the filterbank, then Griffin-Lim
    iterations recover a phase.  Output is exactly T*hop samples, peak
    normalized when it would exceed [-1, 1].

    Parameters
    ----------
    mel : MelSpectrogram
    iterations : int
        Griffin-Lim iteration count, >= 1.
    """
    if iterations < 1:
        raise InvalidInput(f"iterations must be >= 1, got {iterations}")
    frames = check_array_2d(mel.frames, "mel.frames")
    if frames.shape[1] != N_MELS:
        raise InvalidInput(f"expected {N_MELS} mel bands, got {frames.shape[1]}")
    t_frames = frames.shape[0]
    n_out = t_frames * HOP_LENGTH
    target_mag = _mel_to_linear(np.exp(frames))
    window = _analysis_window()
    spec = target_mag.astype(np.complex128)  # zero-phase start
    for _ in range(iterations):
        # Crop to the analysis length before re-framing so the iteration
        # stays on the T-frame grid of the input.
        audio = _overlap_add(np.fft.irfft(spec, n=N_FFT, axis=1))[:n_out]
        re = np.fft.rfft(_frame_signal(audio) * window, n=N_FFT, axis=1)
        spec = target_mag * re / np.maximum(np.abs(re), 1e-12)
    audio = _overlap_add(np.fft.irfft(spec, n=N_FFT, axis=1))[:n_out]
    peak = float(np.max(np.abs(audio))) if audio.size else 0.0
    if peak > 1.0:
        audio = audio / peak
    return AudioClip(samples=audio, utterance_id=mel.utterance_id)
