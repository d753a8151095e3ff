"""Synthetic micro-corpus generation, manifest I/O, dataset pooling.

Speakers are additive harmonic voices: per-speaker f0 mean, spectral tilt
and formant shift carry identity; per-speaker excursion rate, depth and
duration spread carry speaking style.  Neutral utterances hold f0 nearly
flat on uniform phone durations; conversational utterances ride sinusoidal
plus noise f0 excursions (about +-30%) with phone durations varied up to
+-40%.  All randomness flows from one seed through named spawn keys, so a
given (seed, config) pair yields byte-identical audio and manifests.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.io.wavfile

from .dsp import SAMPLE_RATE
from .errors import InvalidConfig, InvalidInput, ManifestError, PoolError

VOICED_PHONES = (
    "aa", "ae", "ah", "ao", "eh", "er", "ey", "ih",
    "iy", "ow", "oy", "uh", "uw", "ax", "ix", "el",
)
UNVOICED_PHONES = ("s", "sh", "f", "t")
PHONE_INVENTORY = VOICED_PHONES + UNVOICED_PHONES
WORD_BOUNDARY = "sp"
STRESS_MARKERS = ("st1", "st2")
# alignment models cover every audible symbol; stress markers carry no time
ALIGNABLE_PHONES = PHONE_INVENTORY + (WORD_BOUNDARY,)
TOKEN_VOCABULARY = PHONE_INVENTORY + (WORD_BOUNDARY,) + STRESS_MARKERS

STYLE_NEUTRAL = "neutral"
STYLE_CONVERSATIONAL = "conversational"
KNOWN_STYLES = (STYLE_NEUTRAL, STYLE_CONVERSATIONAL)

# formant targets (F1, F2, F3) in Hz per voiced phone, spread over the
# vowel space so phones are spectrally distinguishable
_FORMANTS = {
    "aa": (730, 1090, 2440), "ae": (660, 1720, 2410), "ah": (640, 1190, 2390),
    "ao": (570, 840, 2410), "eh": (530, 1840, 2480), "er": (490, 1350, 1690),
    "ey": (480, 2080, 2540), "ih": (390, 1990, 2550), "iy": (270, 2290, 3010),
    "ow": (450, 1030, 2380), "oy": (500, 1250, 2620), "uh": (440, 1020, 2240),
    "uw": (300, 870, 2240), "ax": (500, 1500, 2500), "ix": (400, 1900, 2560),
    "el": (450, 1200, 2800),
}
# noise band (center Hz, width Hz, rms) per unvoiced phone
_NOISE_BANDS = {
    "s": (5200.0, 1400.0, 0.050),
    "sh": (3300.0, 1100.0, 0.055),
    "f": (4200.0, 2600.0, 0.030),
    "t": (4700.0, 2200.0, 0.040),
}

# identity slots cycled over speaker index; means kept well apart so
# converted-speech f0 checks have headroom
_F0_MEAN_SLOTS = (150.0, 115.0, 230.0, 185.0, 95.0, 265.0, 130.0, 205.0)
_FORMANT_SHIFT_SLOTS = (1.0, 0.88, 1.15, 1.06, 0.82, 1.22, 0.94, 1.1)
_TILT_SLOTS = (-12.0, -10.0, -14.0, -9.0, -11.0, -15.0, -13.0, -10.0)
# style slots: (excursion rate Hz, log-depth, duration spread) per speaker
# index; distinct rates and depths keep supporting styles separable
_STYLE_SLOTS = (
    (2.2, 0.20, 0.30), (1.7, 0.18, 0.25), (3.4, 0.26, 0.40),
    (2.6, 0.22, 0.32), (4.3, 0.29, 0.38), (1.2, 0.16, 0.20),
    (3.0, 0.24, 0.35), (3.8, 0.27, 0.28),
)

_BASE_PHONE_SECONDS = 0.096
_BASE_PAUSE_SECONDS = 0.060
_NEUTRAL_JITTER_LOG = float(np.log(1.05))


@dataclass
class SpeakerProfile:
    f0_mean: float
    f0_range: float
    spectral_tilt: float
    formant_shift: float

    def __post_init__(self):
        if not 80.0 <= self.f0_mean <= 300.0:
            raise InvalidConfig(f"f0_mean {self.f0_mean} outside [80, 300]")
        if not 0.8 <= self.formant_shift <= 1.25:
            raise InvalidConfig(
                f"formant_shift {self.formant_shift} outside [0.8, 1.25]"
            )


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: str
    style: str
    phones: list
    audio_path: str
    split: str


@dataclass
class Manifest:
    utterances: list
    speakers: dict
    root: Path = field(default_factory=Path, compare=False)

    def audio_file(self, utt):
        return Path(self.root) / utt.audio_path

    def speaker_role(self, speaker_id):
        return self.speakers[speaker_id]["role"]

    @property
    def target_speaker(self):
        for sid, info in self.speakers.items():
            if info["role"] == "target":
                return sid
        raise ManifestError("no target speaker in manifest")

    def subset(self, speaker_id=None, style=None, split=None):
        out = []
        for u in self.utterances:
            if speaker_id is not None and u.speaker_id != speaker_id:
                continue
            if style is not None and u.style != style:
                continue
            if split is not None and u.split != split:
                continue
            out.append(u)
        return out


def speaker_profile_for(index):
    """Deterministic identity profile for speaker slot `index`."""
    k = index % len(_F0_MEAN_SLOTS)
    f0_mean = _F0_MEAN_SLOTS[k]
    depth = _STYLE_SLOTS[index % len(_STYLE_SLOTS)][1]
    return SpeakerProfile(
        f0_mean=f0_mean,
        f0_range=2.0 * depth * f0_mean,
        spectral_tilt=_TILT_SLOTS[k],
        formant_shift=_FORMANT_SHIFT_SLOTS[k],
    )


def _style_knobs(index):
    rate, depth, dur_spread = _STYLE_SLOTS[index % len(_STYLE_SLOTS)]
    return rate, depth, dur_spread


def _sample_tokens(rng):
    """Token sequence for one sentence: words of phones, boundary tokens
    between words, stress markers after some vowels."""
    tokens = [WORD_BOUNDARY]
    for _ in range(int(rng.integers(4, 9))):
        n_phones = int(rng.integers(1, 5))
        word = []
        for i in range(n_phones):
            if i > 0 and rng.random() < 0.25:
                word.append(UNVOICED_PHONES[int(rng.integers(len(UNVOICED_PHONES)))])
            else:
                word.append(VOICED_PHONES[int(rng.integers(len(VOICED_PHONES)))])
                if rng.random() < 0.25:
                    word.append(STRESS_MARKERS[int(rng.integers(2))])
        tokens.extend(word)
        tokens.append(WORD_BOUNDARY)
    return tokens


def _formant_envelope(freqs, phone, shift):
    f1, f2, f3 = (np.array(_FORMANTS[phone]) * shift)
    env = np.zeros_like(freqs)
    for center, weight in ((f1, 1.0), (f2, 0.7), (f3, 0.35)):
        bw = 70.0 + 0.06 * center
        env += weight / (1.0 + ((freqs - center) / bw) ** 2)
    return env + 0.02


def _render_voiced(phone, f0_curve, tilt_db, shift, rng):
    """Additive harmonic synthesis over a per-sample f0 curve."""
    n = f0_curve.size
    phase0 = 2.0 * np.pi * np.cumsum(f0_curve) / SAMPLE_RATE
    f0_max = float(np.max(f0_curve))
    n_harm = min(60, int((SAMPLE_RATE / 2 - 400.0) / f0_max))
    h = np.arange(1, n_harm + 1)
    tilt_gain = 10.0 ** (tilt_db * np.log2(h) / 20.0)
    # (H, n) harmonic frequency tracks -> formant envelope weights
    freq_tracks = h[:, None] * f0_curve[None, :]
    env = np.empty_like(freq_tracks)
    for i in range(n_harm):
        env[i] = _formant_envelope(freq_tracks[i], phone, shift)
    amps = env * tilt_gain[:, None]
    # glottal-source emphasis: keep the fundamental competitive with the
    # strongest formant harmonic so pitch tracking never sees an
    # even-harmonic-dominated comb
    amps[0] = np.maximum(amps[0], 0.55 * np.max(amps, axis=0))
    audio = np.sum(amps * np.sin(h[:, None] * phase0[None, :]), axis=0)
    rms = np.sqrt(np.mean(audio**2)) + 1e-9
    return audio * (0.17 / rms)


def _render_noise(phone, n, rng):
    center, width, rms = _NOISE_BANDS[phone]
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    spec *= np.exp(-(((freqs - center) / width) ** 2)) + 0.02
    shaped = np.fft.irfft(spec, n=n)
    return shaped * (rms / (np.sqrt(np.mean(shaped**2)) + 1e-9))


def _edge_fade(segment, fade_samples=48):
    k = min(fade_samples, segment.size // 2)
    if k > 0:
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(k) / k))
        segment[:k] *= ramp
        segment[-k:] *= ramp[::-1]
    return segment


def _excursion_curve(style, n, speaker_index, profile, rng):
    """Log-f0 excursion over n samples, mean removed later over voiced spans."""
    t = np.arange(n) / SAMPLE_RATE
    if style == STYLE_NEUTRAL:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        return _NEUTRAL_JITTER_LOG * np.sin(2.0 * np.pi * 0.5 * t + phase)
    rate, _, _ = _style_knobs(speaker_index)
    depth = 0.5 * profile.f0_range / profile.f0_mean
    rate = rate * float(rng.uniform(0.94, 1.06))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    slow = rng.standard_normal(max(8, n // 4000))
    drift = np.interp(np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, slow.size), slow)
    return depth * np.sin(2.0 * np.pi * rate * t + phase) + 0.04 * drift


def render_utterance(tokens, style, speaker_index, profile, rng):
    """Waveform plus kept-token list for one utterance."""
    _, _, dur_spread = _style_knobs(speaker_index)
    segments = []
    for tok in tokens:
        if tok in STRESS_MARKERS:
            segments.append((tok, 0))
            continue
        base = _BASE_PAUSE_SECONDS if tok == WORD_BOUNDARY else _BASE_PHONE_SECONDS
        if style == STYLE_CONVERSATIONAL:
            base *= 1.0 + float(rng.uniform(-dur_spread, dur_spread))
        segments.append((tok, int(round(base * SAMPLE_RATE))))
    total = sum(n for _, n in segments)
    excursion = _excursion_curve(style, total, speaker_index, profile, rng)

    # center the contour so the utterance's voiced log-f0 mean lands on the
    # profile mean regardless of excursion phase
    voiced_mask = np.zeros(total, dtype=bool)
    cursor = 0
    for tok, n in segments:
        if tok in VOICED_PHONES:
            voiced_mask[cursor : cursor + n] = True
        cursor += n
    if np.any(voiced_mask):
        excursion = excursion - float(np.mean(excursion[voiced_mask]))
    log_f0 = np.log(profile.f0_mean) + excursion

    audio = np.zeros(total)
    cursor = 0
    for tok, n in segments:
        if n == 0:
            continue
        span = slice(cursor, cursor + n)
        if tok in VOICED_PHONES:
            seg = _render_voiced(
                tok, np.exp(log_f0[span]), profile.spectral_tilt,
                profile.formant_shift, rng,
            )
        elif tok in UNVOICED_PHONES:
            seg = _render_noise(tok, n, rng)
        else:
            seg = rng.standard_normal(n) * 0.001
        audio[span] = _edge_fade(seg)
        cursor += n
    peak = float(np.max(np.abs(audio)))
    if peak > 0.95:
        audio *= 0.95 / peak
    return audio


def write_wav(path, samples):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.asarray(samples) * 32767.0, -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(path, SAMPLE_RATE, pcm)


def read_wav(path):
    rate, pcm = scipy.io.wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise InvalidInput(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    return pcm.astype(np.float64) / 32768.0


def _split_for(index):
    mod = index % 10
    if mod == 8:
        return "dev"
    if mod == 9:
        return "test"
    return "train"


def generate_synthetic_corpus(
    out_dir,
    seed=0,
    n_speakers=3,
    utterances_per_speaker=40,
    styles=(STYLE_NEUTRAL, STYLE_CONVERSATIONAL),
):
    """Generate audio plus manifest for a synthetic corpus under `out_dir`.

    Speaker 0 is the target (neutral style); the rest are supporting
    speakers (conversational style when enabled).  `utterances_per_speaker`
    may be an int applied to everyone or a {"target": n, "supporting": m}
    mapping.  Returns the Manifest, already written to disk.
    """
    styles = tuple(styles)
    if not styles:
        raise InvalidConfig("styles must be non-empty")
    for s in styles:
        if s not in KNOWN_STYLES:
            raise InvalidConfig(f"unknown style {s!r}")
    if n_speakers < 2:
        raise InvalidConfig(f"need at least 2 speakers, got {n_speakers}")
    if isinstance(utterances_per_speaker, dict):
        counts = dict(utterances_per_speaker)
    else:
        counts = {"target": int(utterances_per_speaker),
                  "supporting": int(utterances_per_speaker)}

    out_dir = Path(out_dir)
    utterances = []
    speakers = {}
    for spk_index in range(n_speakers):
        role = "target" if spk_index == 0 else "supporting"
        if role == "target":
            speaker_id = "tgt0"
            style = STYLE_NEUTRAL if STYLE_NEUTRAL in styles else styles[0]
        else:
            speaker_id = f"sup{spk_index}"
            style = (
                STYLE_CONVERSATIONAL
                if STYLE_CONVERSATIONAL in styles
                else styles[0]
            )
        profile = speaker_profile_for(spk_index)
        speakers[speaker_id] = {
            "gender": "f" if profile.f0_mean >= 165.0 else "m",
            "role": role,
            "profile": asdict(profile),
        }
        for i in range(int(counts[role])):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(spk_index, i))
            )
            tokens = _sample_tokens(rng)
            audio = render_utterance(tokens, style, spk_index, profile, rng)
            utt_id = f"{speaker_id}_{style[:3]}{i:03d}"
            rel_path = f"audio/{utt_id}.wav"
            write_wav(out_dir / rel_path, audio)
            utterances.append(
                Utterance(
                    utterance_id=utt_id,
                    speaker_id=speaker_id,
                    style=style,
                    phones=tokens,
                    audio_path=rel_path,
                    split=_split_for(i),
                )
            )
    manifest = Manifest(utterances=utterances, speakers=speakers, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def write_manifest(manifest, path):
    """JSON Lines manifest plus sibling speakers.json."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for u in manifest.utterances:
            f.write(json.dumps({
                "utterance_id": u.utterance_id,
                "speaker_id": u.speaker_id,
                "style": u.style,
                "phones": list(u.phones),
                "audio_path": u.audio_path,
                "split": u.split,
            }, sort_keys=True))
            f.write("\n")
    with open(path.parent / "speakers.json", "w") as f:
        json.dump(manifest.speakers, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path, check_audio=True):
    """Load and validate a manifest written by write_manifest."""
    path = Path(path)
    root = path.parent
    speakers_path = root / "speakers.json"
    if not speakers_path.exists():
        raise ManifestError(f"missing speaker table {speakers_path}")
    with open(speakers_path) as f:
        speakers = json.load(f)
    roles = [s for s, info in speakers.items() if info.get("role") == "target"]
    if len(roles) != 1:
        raise ManifestError(
            f"manifest must have exactly one target speaker, found {roles}"
        )
    utterances = []
    seen = set()
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            utt = Utterance(
                utterance_id=rec["utterance_id"],
                speaker_id=rec["speaker_id"],
                style=rec["style"],
                phones=list(rec["phones"]),
                audio_path=rec["audio_path"],
                split=rec["split"],
            )
            if utt.utterance_id in seen:
                raise ManifestError(
                    f"line {line_no}: duplicate utterance_id {utt.utterance_id!r}"
                )
            seen.add(utt.utterance_id)
            if utt.speaker_id not in speakers:
                raise ManifestError(
                    f"line {line_no}: unknown speaker {utt.speaker_id!r}"
                )
            if not utt.phones:
                raise ManifestError(
                    f"line {line_no}: empty phone sequence in {utt.utterance_id!r}"
                )
            if check_audio and not (root / utt.audio_path).exists():
                raise ManifestError(
                    f"line {line_no}: missing audio file {utt.audio_path!r}"
                )
            utterances.append(utt)
    return Manifest(utterances=utterances, speakers=speakers, root=root)


@dataclass
class ConvertedUtterance:
    """A voice-converted item: target identity, source speaker as style."""
    utterance_id: str
    speaker_id: str
    style_label: str
    mel_path: str
    phones: list


@dataclass
class PooledItem:
    utterance_id: str
    phones: list
    mel_path: str
    style_label: str
    origin: str  # natural | converted


def pool_datasets(natural, converted, target_speaker, mel_path_for=None):
    """Flatten natural target utterances and converted items into one set.

    Natural items carry style_label "neutral"; converted items keep their
    originating supporting speaker as style_label.  Converted items must
    already carry the target speaker identity.
    """
    pool = []
    for u in natural:
        if u.speaker_id != target_speaker:
            raise PoolError(
                f"natural item {u.utterance_id!r} belongs to {u.speaker_id!r}, "
                f"not target {target_speaker!r}"
            )
        mel = mel_path_for(u.utterance_id) if mel_path_for else ""
        pool.append(PooledItem(
            utterance_id=u.utterance_id,
            phones=list(u.phones),
            mel_path=str(mel),
            style_label=STYLE_NEUTRAL,
            origin="natural",
        ))
    for c in converted:
        if c.speaker_id != target_speaker:
            raise PoolError(
                f"converted item {c.utterance_id!r} carries speaker "
                f"{c.speaker_id!r}, not target {target_speaker!r}"
            )
        pool.append(PooledItem(
            utterance_id=c.utterance_id,
            phones=list(c.phones),
            mel_path=str(c.mel_path),
            style_label=c.style_label,
            origin="converted",
        ))
    return pool
