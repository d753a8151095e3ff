"""Sequence-to-sequence TTS with a variational style reference encoder.

Single speaker, multiple styles.  A token encoder reads phones, word
boundaries and stress markers; a reference encoder compresses a mel
spectrogram into a 16-dim z; an autoregressive decoder with
location-sensitive attention emits mel frames two at a time.  Style at
synthesis time is a z centroid computed per style label.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from . import corpus, featio
from .dsp import LOG_FLOOR, AudioClip, MelSpectrogram, griffin_lim_invert
from .errors import DataError, InvalidInput, SynthesisRunaway
from .validation import check_fitted, check_non_negative_int

Z_DIM = 16
TOKEN_EMB_DIM = 256
ENCODER_DIM = 256
PRENET_DIM = 64
DECODER_HIDDEN = 512
ATTENTION_DIM = 128
LOCATION_FILTERS = 32
LOCATION_WIDTH = 31
REDUCTION = 2
STOP_POS_WEIGHT = 5.0
MAX_LENGTH_FACTOR = 10
REF_MIN_FRAMES = 64

BETA = 1e-3
TRAIN_STEPS = 5000
BATCH_SIZE = 8
LEARNING_RATE = 1e-3

MEL_FLOOR = float(np.log(LOG_FLOOR))


@dataclass
class PhoneticInput:
    """Token IDs over the phone + word-boundary + stress vocabulary."""

    token_ids: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64).reshape(-1)
        if self.token_ids.size == 0:
            raise InvalidInput("phonetic input is empty")
        n = len(corpus.TOKEN_VOCABULARY)
        if self.token_ids.min() < 0 or self.token_ids.max() >= n:
            raise InvalidInput(f"token IDs must lie in [0, {n})")


_TOKEN_TO_ID = {tok: i for i, tok in enumerate(corpus.TOKEN_VOCABULARY)}


def tokens_to_input(tokens) -> PhoneticInput:
    """Map a token-string sequence to a PhoneticInput."""
    tokens = list(tokens)
    unknown = sorted({t for t in tokens if t not in _TOKEN_TO_ID})
    if unknown:
        raise InvalidInput(f"unknown tokens: {unknown}")
    return PhoneticInput(np.array([_TOKEN_TO_ID[t] for t in tokens]))


@dataclass
class StyleVector:
    z: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.z)):
            raise InvalidInput("style vector contains non-finite values")


class LocationAttention(nn.Module):
    """Single-head content + location attention over encoder memory."""

    def __init__(self, query_dim, memory_dim, attention_dim=ATTENTION_DIM):
        super().__init__()
        self.query_proj = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory_proj = nn.Linear(memory_dim, attention_dim, bias=False)
        self.location_conv = nn.Conv1d(1, LOCATION_FILTERS, LOCATION_WIDTH,
                                       padding=LOCATION_WIDTH // 2, bias=False)
        self.location_proj = nn.Linear(LOCATION_FILTERS, attention_dim,
                                       bias=False)
        self.score = nn.Linear(attention_dim, 1, bias=True)

    def forward(self, query, memory, memory_keys, cumulative):
        # cumulative (B, L): attention mass already spent per token
        loc = self.location_conv(cumulative[:, None, :]).transpose(1, 2)
        energy = self.score(torch.tanh(
            self.query_proj(query)[:, None, :] + memory_keys
            + self.location_proj(loc))).squeeze(-1)
        weights = torch.softmax(energy, dim=-1)
        context = torch.bmm(weights[:, None, :], memory).squeeze(1)
        return context, weights


class Prenet(nn.Module):
    """Two narrow layers with dropout kept active at inference."""

    def __init__(self, in_dim, hidden=PRENET_DIM, p=0.5):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.p = p

    def forward(self, x, generator=None):
        for fc in (self.fc1, self.fc2):
            x = torch.relu(fc(x))
            if generator is None:
                x = F.dropout(x, self.p, training=True)
            else:
                keep = (torch.rand(x.shape, generator=generator)
                        >= self.p).float()
                x = x * keep / (1.0 - self.p)
        return x


class TtsModel(nn.Module):
    """Token encoder + variational reference encoder + attention decoder."""

    def __init__(self, n_mels: int = 80,
                 vocab_size: Optional[int] = None, z_dim: int = Z_DIM,
                 reduction: int = REDUCTION):
        super().__init__()
        if vocab_size is None:
            vocab_size = len(corpus.TOKEN_VOCABULARY)
        self.n_mels = n_mels
        self.vocab_size = vocab_size
        self.z_dim = z_dim
        self.reduction = reduction

        self.token_emb = nn.Embedding(vocab_size, TOKEN_EMB_DIM)
        self.enc_convs = nn.ModuleList([
            nn.Conv1d(TOKEN_EMB_DIM, TOKEN_EMB_DIM, 5, padding=2)
            for _ in range(3)
        ])
        self.enc_rnn = nn.GRU(TOKEN_EMB_DIM, ENCODER_DIM // 2,
                              batch_first=True, bidirectional=True)

        chans = [n_mels, 32, 32, 64, 64, 128, 128]
        self.ref_convs = nn.ModuleList([
            nn.Conv1d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(6)
        ])
        self.ref_rnn = nn.GRU(chans[-1], 128, batch_first=True)
        self.mu_head = nn.Linear(128, z_dim)
        self.log_sigma_head = nn.Linear(128, z_dim)

        memory_dim = ENCODER_DIM + z_dim
        self.prenet = Prenet(n_mels)
        self.att_rnn = nn.GRUCell(PRENET_DIM + memory_dim, DECODER_HIDDEN)
        self.attention = LocationAttention(DECODER_HIDDEN, memory_dim)
        self.dec_rnn = nn.GRUCell(DECODER_HIDDEN + memory_dim, DECODER_HIDDEN)
        self.frame_proj = nn.Linear(DECODER_HIDDEN + memory_dim,
                                    n_mels * reduction)
        self.stop_proj = nn.Linear(DECODER_HIDDEN + memory_dim, reduction)

    def encode_tokens(self, tokens):
        # tokens (B, L) int64 -> memory (B, L, ENCODER_DIM)
        x = self.token_emb(tokens).transpose(1, 2)
        for conv in self.enc_convs:
            x = torch.relu(conv(x))
        out, _ = self.enc_rnn(x.transpose(1, 2))
        return out

    def encode_reference(self, mels, sample: bool, generator=None):
        # mels (B, T, n_mels); T right-padded with floor frames to >= 64
        b, t, _ = mels.shape
        if t < REF_MIN_FRAMES:
            pad = mels.new_full((b, REF_MIN_FRAMES - t, self.n_mels),
                                MEL_FLOOR)
            mels = torch.cat([mels, pad], dim=1)
        x = mels.transpose(1, 2)
        for conv in self.ref_convs:
            x = torch.relu(conv(x))
        out, _ = self.ref_rnn(x.transpose(1, 2))
        summary = out[:, -1]
        mu = self.mu_head(summary)
        log_sigma = self.log_sigma_head(summary)
        if sample:
            eps = (torch.randn(mu.shape, generator=generator)
                   if generator is not None else torch.randn_like(mu))
            z = mu + torch.exp(log_sigma) * eps
        else:
            z = mu
        return z, mu, log_sigma

    def _decode(self, memory, teacher=None, max_steps=None, generator=None):
        b, length, _ = memory.shape
        keys = self.attention.memory_proj(memory)
        h_att = memory.new_zeros(b, DECODER_HIDDEN)
        h_dec = memory.new_zeros(b, DECODER_HIDDEN)
        cumulative = memory.new_zeros(b, length)
        context = memory.new_zeros(b, memory.shape[-1])
        frame = memory.new_full((b, self.n_mels), MEL_FLOOR)

        if teacher is not None:
            n_steps = teacher.shape[1] // self.reduction
        else:
            n_steps = max_steps
        frames, stops, alignments = [], [], []
        for step in range(n_steps):
            pre = self.prenet(frame, generator=generator)
            h_att = self.att_rnn(torch.cat([pre, context], dim=-1), h_att)
            context, weights = self.attention(h_att, memory, keys, cumulative)
            cumulative = cumulative + weights
            h_dec = self.dec_rnn(torch.cat([h_att, context], dim=-1), h_dec)
            hidden = torch.cat([h_dec, context], dim=-1)
            group = self.frame_proj(hidden).reshape(b, self.reduction,
                                                    self.n_mels)
            stop = self.stop_proj(hidden)
            frames.append(group)
            stops.append(stop)
            alignments.append(weights)
            if teacher is not None:
                frame = teacher[:, (step + 1) * self.reduction - 1]
            else:
                frame = group[:, -1]
                if b == 1 and torch.sigmoid(stop).max() > 0.5:
                    break
        mel = torch.cat(frames, dim=1)
        stop_logits = torch.cat(stops, dim=1)
        attention = torch.stack(alignments, dim=1)
        return mel, stop_logits, attention


def _pad_reduction(t: int, reduction: int) -> int:
    return -(-t // reduction) * reduction


def tts_forward(model, phonetic: PhoneticInput, z, teacher_mel=None,
                generator=None):
    """Run the model on one utterance.

    With teacher_mel the decoder is teacher-forced and the output length
    is the teacher length rounded up to a reduction multiple.  Without it
    the decoder free-runs until the stop sigmoid crosses 0.5 or a cap of
    MAX_LENGTH_FACTOR times the token count.

    Returns
    -------
    (mel, stop_logits, attention) torch tensors: (T, n_mels), (T,),
    (n_steps, n_tokens).
    """
    if not isinstance(phonetic, PhoneticInput):
        phonetic = tokens_to_input(phonetic)
    z_vec = z.z if isinstance(z, StyleVector) else np.asarray(z)
    z_t = torch.as_tensor(np.asarray(z_vec, dtype=np.float32)).reshape(1, -1)

    tokens = torch.from_numpy(phonetic.token_ids).unsqueeze(0)
    memory = model.encode_tokens(tokens)
    memory = torch.cat([memory, z_t[:, None, :].expand(-1, memory.shape[1],
                                                       -1)], dim=-1)
    if teacher_mel is not None:
        frames = np.asarray(getattr(teacher_mel, "frames", teacher_mel),
                            dtype=np.float32)
        t_pad = _pad_reduction(frames.shape[0], model.reduction)
        teacher = np.full((t_pad, model.n_mels), MEL_FLOOR, dtype=np.float32)
        teacher[:frames.shape[0]] = frames
        teacher_t = torch.from_numpy(teacher).unsqueeze(0)
        mel, stops, att = model._decode(memory, teacher=teacher_t,
                                        generator=generator)
    else:
        cap = -(-MAX_LENGTH_FACTOR * phonetic.token_ids.size
                // model.reduction)
        mel, stops, att = model._decode(memory, max_steps=cap,
                                        generator=generator)
    return mel[0], stops[0], att[0]


def kl_to_standard_normal(mu, log_sigma):
    """KL of a diagonal gaussian to N(0, I), summed over dims, batch mean."""
    per_item = -0.5 * (1 + 2 * log_sigma - mu ** 2
                       - torch.exp(2 * log_sigma)).sum(dim=-1)
    return per_item.mean()


@dataclass
class TtsLossParts:
    total: torch.Tensor
    l1: torch.Tensor
    kl: torch.Tensor
    stop_ce: torch.Tensor


def tts_loss(pred, target, stop_logits, stop_targets, mu, log_sigma,
             beta: float) -> TtsLossParts:
    """total = L1 + beta * KL + stop cross-entropy (positive class x5)."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    stop_logits = torch.as_tensor(stop_logits)
    stop_targets = torch.as_tensor(stop_targets)
    if pred.shape != target.shape:
        raise InvalidInput(f"pred and target shapes disagree: "
                           f"{tuple(pred.shape)} vs {tuple(target.shape)}")
    if stop_logits.shape != stop_targets.shape:
        raise InvalidInput(f"stop logits and targets disagree: "
                           f"{tuple(stop_logits.shape)} vs "
                           f"{tuple(stop_targets.shape)}")
    l1 = (pred - target).abs().mean()
    kl = kl_to_standard_normal(torch.as_tensor(mu),
                               torch.as_tensor(log_sigma))
    ce = F.binary_cross_entropy_with_logits(
        stop_logits, stop_targets.to(stop_logits.dtype),
        pos_weight=torch.as_tensor(STOP_POS_WEIGHT,
                                   dtype=stop_logits.dtype))
    return TtsLossParts(total=l1 + beta * kl + ce, l1=l1, kl=kl, stop_ce=ce)


def beta_schedule(step: int, total_steps: int, beta: float = BETA,
                  warmup_fraction: float = 0.1) -> float:
    """Linear KL warm-up from 0 over the first fraction of training."""
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    return beta * min(1.0, step / warmup)


@dataclass
class TtsTrainHistory:
    losses: list = field(default_factory=list)
    probe_l1_initial: float = float("nan")
    probe_l1_final: float = float("nan")


def _item_mel(mels, item):
    mel = mels.get(item.utterance_id)
    if mel is None:
        return None
    return np.asarray(getattr(mel, "frames", mel), dtype=np.float32)


def _batch_tensors(items, mels, model, picks):
    tokens = [tokens_to_input(items[i].phones).token_ids for i in picks]
    arrays = [_item_mel(mels, items[i]) for i in picks]
    l_max = max(t.size for t in tokens)
    t_max = _pad_reduction(max(a.shape[0] for a in arrays), model.reduction)
    b = len(picks)
    token_pad = np.zeros((b, l_max), dtype=np.int64)
    mel_pad = np.full((b, t_max, model.n_mels), MEL_FLOOR, dtype=np.float32)
    stop = np.zeros((b, t_max), dtype=np.float32)
    for k, (tok, arr) in enumerate(zip(tokens, arrays)):
        token_pad[k, :tok.size] = tok
        token_pad[k, tok.size:] = tok[-1]
        mel_pad[k, :arr.shape[0]] = arr
        stop[k, arr.shape[0] - 1:] = 1.0
    return (torch.from_numpy(token_pad), torch.from_numpy(mel_pad),
            torch.from_numpy(stop))


def train_tts(items, mels, n_steps: int = TRAIN_STEPS,
              batch_size: int = BATCH_SIZE, lr: float = LEARNING_RATE,
              beta: float = BETA, seed: int = 0):
    """Train on a pooled natural + converted single-speaker set.

    Parameters
    ----------
    items : sequence of pooled items (phones + style_label + utterance_id)
    mels : dict mapping utterance_id to mel frames
    n_steps : optimization steps

    Returns
    -------
    (model, history); the reference encoder sees each item's own mel with
    sampling on, so the stored per-item z means come from a final
    deterministic pass.
    """
    check_non_negative_int(n_steps, "n_steps")
    items = list(items)
    missing = [it.utterance_id for it in items
               if _item_mel(mels, it) is None]
    if missing:
        raise DataError(f"missing mel features for: {missing}")
    if not items:
        raise DataError("empty training set")

    torch.manual_seed(seed)
    sample_mel = _item_mel(mels, items[0])
    model = TtsModel(n_mels=sample_mel.shape[1])

    probe_rng = np.random.default_rng(seed)
    probe_picks = [int(i) for i in probe_rng.choice(
        len(items), size=min(batch_size, len(items)), replace=False)]
    probe = _batch_tensors(items, mels, model, probe_picks)

    def _teacher_loss(batch, beta_now):
        tokens, mel_t, stop_t = batch
        memory = model.encode_tokens(tokens)
        z, mu, log_sigma = model.encode_reference(mel_t, sample=True)
        memory = torch.cat(
            [memory, z[:, None, :].expand(-1, memory.shape[1], -1)], dim=-1)
        pred, stops, _ = model._decode(memory, teacher=mel_t)
        return tts_loss(pred, mel_t, stops, stop_t, mu, log_sigma, beta_now)

    def _probe_l1():
        with torch.no_grad():
            return float(_teacher_loss(probe, 0.0).l1)

    history = TtsTrainHistory(probe_l1_initial=_probe_l1())
    rng = np.random.default_rng(seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for step in range(n_steps):
        picks = [int(i) for i in rng.choice(
            len(items), size=min(batch_size, len(items)),
            replace=len(items) < batch_size)]
        batch = _batch_tensors(items, mels, model, picks)
        parts = _teacher_loss(batch, beta_schedule(step, n_steps, beta))
        opt.zero_grad()
        parts.total.backward()
        nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        history.losses.append((float(parts.total.detach()),
                               float(parts.l1.detach()),
                               float(parts.kl.detach()),
                               float(parts.stop_ce.detach())))
    history.probe_l1_final = _probe_l1()
    return model, history


def reference_to_z(model, mel, sample: bool = False, generator=None,
                   label: str = ""):
    """Utterance-level style vector from a mel spectrogram.

    Returns (StyleVector, mu, log_sigma); sample=False returns the mean.
    """
    frames = np.asarray(getattr(mel, "frames", mel), dtype=np.float32)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise InvalidInput("mel must be a non-empty 2-D array")
    with torch.no_grad():
        z, mu, log_sigma = model.encode_reference(
            torch.from_numpy(frames).unsqueeze(0), sample, generator)
    return (StyleVector(z[0].numpy().astype(np.float64), label=label),
            mu[0], log_sigma[0])


def compute_style_centroid(model, items, mels) -> StyleVector:
    """Mean of per-utterance z means over items sharing one style label."""
    items = list(items)
    if not items:
        raise InvalidInput("cannot compute a centroid of zero items")
    labels = sorted({it.style_label for it in items})
    if len(labels) != 1:
        raise InvalidInput(f"items mix style labels: {labels}")
    mus = []
    for it in items:
        mel = _item_mel(mels, it)
        if mel is None:
            raise DataError(f"missing mel features for: [{it.utterance_id!r}]")
        _, mu, _ = reference_to_z(model, mel, sample=False)
        mus.append(mu.numpy())
    return StyleVector(np.mean(mus, axis=0).astype(np.float64),
                       label=labels[0])


@dataclass
class SynthesisResult:
    audio: AudioClip
    mel: MelSpectrogram
    stop_step: int
    ran_away: bool
    attention: np.ndarray


def synthesize(model, phonetic, style: StyleVector, vocoder=None,
               seed: int = 0) -> SynthesisResult:
    """Free-running synthesis conditioned on a style centroid.

    The prenet keeps dropout active, driven by a generator seeded from
    ``seed``, so equal (text, style, seed) gives identical audio.  If the
    decoder hits the length cap a SynthesisRunaway warning is issued and
    the capped audio is still returned.
    """
    if not isinstance(phonetic, PhoneticInput):
        phonetic = tokens_to_input(phonetic)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        mel_t, stops, att = tts_forward(model, phonetic, style,
                                        generator=generator)
    sig = torch.sigmoid(stops).numpy()
    hit = np.nonzero(sig > 0.5)[0]
    if hit.size:
        stop_step = int(hit[0])
        frames = mel_t[:stop_step + 1].numpy()
        ran_away = False
    else:
        stop_step = int(mel_t.shape[0]) - 1
        frames = mel_t.numpy()
        ran_away = True
        warnings.warn(
            f"synthesis hit the length cap ({mel_t.shape[0]} frames) "
            f"without a stop decision", SynthesisRunaway)
    mel = MelSpectrogram(frames.astype(np.float64))
    vocoder = vocoder or griffin_lim_invert
    audio = vocoder(mel)
    if not isinstance(audio, AudioClip):
        audio = AudioClip(np.asarray(audio))
    return SynthesisResult(audio=audio, mel=mel, stop_step=stop_step,
                           ran_away=ran_away,
                           attention=att.numpy().astype(np.float64))


def save_model(model: TtsModel, prefix):
    tensors = {name: p.detach().numpy()
               for name, p in model.state_dict().items()}
    featio.save_tensors(prefix, tensors, header_extra={
        "n_mels": model.n_mels, "vocab_size": model.vocab_size,
        "z_dim": model.z_dim, "reduction": model.reduction,
    })


def load_model(prefix) -> TtsModel:
    tensors, header = featio.load_tensors(prefix)
    model = TtsModel(n_mels=int(header["n_mels"]),
                     vocab_size=int(header["vocab_size"]),
                     z_dim=int(header["z_dim"]),
                     reduction=int(header["reduction"]))
    model.load_state_dict({name: torch.from_numpy(np.array(v))
                           for name, v in tensors.items()})
    return model


class StyleSynthesizer(BaseEstimator):
    """Estimator wrapper: fit trains TTS, transform synthesizes."""

    def __init__(self, n_steps=TRAIN_STEPS, batch_size=BATCH_SIZE,
                 lr=LEARNING_RATE, beta=BETA, vocoder=None, seed=0):
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.beta = beta
        self.vocoder = vocoder
        self.seed = seed
        self.model_ = None
        self.history_ = None

    def fit(self, items, mels):
        self.model_, self.history_ = train_tts(
            items, mels, n_steps=self.n_steps, batch_size=self.batch_size,
            lr=self.lr, beta=self.beta, seed=self.seed)
        return self

    def transform(self, sentences, style: StyleVector):
        check_fitted(self, ["model_"])
        return [synthesize(self.model_, s, style, vocoder=self.vocoder,
                           seed=self.seed + i)
                for i, s in enumerate(sentences)]
