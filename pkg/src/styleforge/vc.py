"""Voice conversion: same words and prosody, different speaker.

A variational reference encoder squeezes the source mel through a
temporal bottleneck, a phonetic encoder embeds the aligned HMM state
sequence, and a recurrent decoder rebuilds mel frames conditioned on
log-f0 and a speaker embedding.  Trained as an auto-encoder; at
conversion time the decoder is fed the target speaker's centroid and a
mean-shifted f0 track instead.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator

from . import featio
from .dsp import F0Track, MelSpectrogram, normalize_log_f0
from .errors import DataError, InvalidInput
from .spkemb import SpeakerEmbedding, embed_utterance
from .validation import check_array_2d, check_fitted, check_non_negative_int

N_STATES = 63
LATENT_DIM = 16
BOTTLENECK = 8
STATE_EMB_DIM = 64
PHONETIC_DIM = 128
DECODER_HIDDEN = 256
SPEAKER_DIM = 64

BETA = 1e-3
F0_GAIN = 8.0
WARMUP_FRACTION = 0.1
STAGE1_STEPS = 4000
STAGE2_STEPS = 1000
BATCH_SIZE = 8
STAGE1_LR = 1e-3
STAGE2_LR = 1e-4


@dataclass
class VcLatent:
    """Bottleneck posterior for one utterance: (T/8, latent_dim) each."""

    z: torch.Tensor
    mu: torch.Tensor
    log_sigma: torch.Tensor


@dataclass
class UtteranceFeatures:
    """Frame-aligned conditioning bundle for one utterance."""

    utterance_id: str
    speaker_id: str
    mel: np.ndarray
    states: np.ndarray
    log_f0: np.ndarray

    def __post_init__(self):
        self.mel = check_array_2d(self.mel, "mel")
        self.states = np.asarray(self.states, dtype=np.int64).reshape(-1)
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float64).reshape(-1)
        t = self.mel.shape[0]
        if self.states.size != t or self.log_f0.size != t:
            raise InvalidInput(
                f"mel ({t}), states ({self.states.size}) and log_f0 "
                f"({self.log_f0.size}) must share one frame count")


@dataclass
class SpeakerAssets:
    """What conversion needs to know about one speaker."""

    centroid: SpeakerEmbedding
    log_f0_mean: float


class VcModel(nn.Module):
    """Reference encoder + phonetic encoder + frame-synchronous decoder."""

    def __init__(self, n_mels: int = 80, n_states: int = N_STATES,
                 spk_dim: int = SPEAKER_DIM, latent_dim: int = LATENT_DIM,
                 bottleneck: int = BOTTLENECK):
        super().__init__()
        self.n_mels = n_mels
        self.n_states = n_states
        self.spk_dim = spk_dim
        self.latent_dim = latent_dim
        self.bottleneck = bottleneck

        ref_in = n_mels + spk_dim
        self.ref_convs = nn.ModuleList([
            nn.Conv1d(ref_in, 128, kernel_size=3, stride=2, padding=1),
            nn.Conv1d(128, 128, kernel_size=3, stride=2, padding=1),
            nn.Conv1d(128, 128, kernel_size=3, stride=2, padding=1),
        ])
        self.mu_head = nn.Linear(128, latent_dim)
        self.log_sigma_head = nn.Linear(128, latent_dim)

        self.state_emb = nn.Embedding(n_states, STATE_EMB_DIM)
        phon_in = STATE_EMB_DIM + spk_dim
        self.phon_convs = nn.ModuleList([
            nn.Conv1d(phon_in, 128, kernel_size=5, padding=2),
            nn.Conv1d(128, 128, kernel_size=5, padding=2),
            nn.Conv1d(128, 128, kernel_size=5, padding=2),
        ])
        self.phon_rnn = nn.GRU(128, PHONETIC_DIM // 2, batch_first=True,
                               bidirectional=True)

        dec_in = latent_dim + PHONETIC_DIM + 1 + spk_dim
        self.dec_rnn = nn.GRU(dec_in, DECODER_HIDDEN, num_layers=2,
                              batch_first=True)
        self.dec_proj = nn.Linear(DECODER_HIDDEN, n_mels)

    def reference(self, mels, spk, sample: bool, generator=None):
        # mels (B, T, n_mels), spk (B, spk_dim); T padded to a bottleneck
        # multiple by last-frame repetition, trimmed again after upsampling
        b, t, _ = mels.shape
        pad = (-t) % self.bottleneck
        if pad:
            mels = torch.cat([mels, mels[:, -1:].expand(-1, pad, -1)], dim=1)
        x = torch.cat([mels, spk[:, None, :].expand(-1, mels.shape[1], -1)],
                      dim=-1)
        x = x.transpose(1, 2)
        for conv in self.ref_convs:
            x = torch.relu(conv(x))
        x = x.transpose(1, 2)
        mu = self.mu_head(x)
        log_sigma = self.log_sigma_head(x)
        if sample:
            eps = (torch.randn(mu.shape, generator=generator)
                   if generator is not None else torch.randn_like(mu))
            z = mu + torch.exp(log_sigma) * eps
        else:
            z = mu
        up = z.repeat_interleave(self.bottleneck, dim=1)[:, :t]
        return up, VcLatent(z=z, mu=mu, log_sigma=log_sigma)

    def phonetic(self, states, spk):
        # states (B, T) int64, spk (B, spk_dim)
        x = self.state_emb(states)
        x = torch.cat([x, spk[:, None, :].expand(-1, x.shape[1], -1)], dim=-1)
        x = x.transpose(1, 2)
        for conv in self.phon_convs:
            x = torch.relu(conv(x))
        x = x.transpose(1, 2)
        out, _ = self.phon_rnn(x)
        return out

    def decode(self, ref_up, phon, log_f0, spk):
        # per-frame concat [latent, phonetic, log-f0, speaker] -> mel;
        # the lone f0 scalar competes with 208 activation dims, so it is
        # scaled up to keep its variance visible to the decoder
        t = ref_up.shape[1]
        x = torch.cat([
            ref_up, phon, F0_GAIN * log_f0[:, :, None],
            spk[:, None, :].expand(-1, t, -1),
        ], dim=-1)
        out, _ = self.dec_rnn(x)
        return self.dec_proj(out)

    def forward(self, mels, states, log_f0, spk, sample: bool = True,
                generator=None):
        ref_up, latent = self.reference(mels, spk, sample, generator)
        phon = self.phonetic(states, spk)
        pred = self.decode(ref_up, phon, log_f0, spk)
        return pred, latent


def _spk_tensor(speaker_emb):
    vec = speaker_emb.vector if isinstance(speaker_emb, SpeakerEmbedding) \
        else np.asarray(speaker_emb, dtype=np.float64)
    return torch.from_numpy(np.asarray(vec, dtype=np.float32)).reshape(1, -1)


def encode_reference(model, mel, speaker_emb, sample: bool = False,
                     generator=None):
    """Encode one mel through the variational bottleneck.

    Returns
    -------
    (upsampled, latent) : upsampled is (T, latent_dim) matching the input
    frame count exactly; latent holds z, mu, log_sigma at (T/8, latent_dim).
    With sample=False the returned z is the posterior mean.
    """
    frames = check_array_2d(getattr(mel, "frames", mel), "mel")
    x = torch.from_numpy(frames.astype(np.float32)).unsqueeze(0)
    with torch.no_grad():
        up, latent = model.reference(x, _spk_tensor(speaker_emb), sample,
                                     generator)
    return up[0], VcLatent(z=latent.z[0], mu=latent.mu[0],
                           log_sigma=latent.log_sigma[0])


def encode_phonetic(model, states, speaker_emb):
    """Embed an aligned state-ID sequence; returns (T, 128)."""
    ids = np.asarray(getattr(states, "state_ids", states),
                     dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise InvalidInput("state sequence is empty")
    if ids.min() < 0 or ids.max() >= model.n_states:
        raise InvalidInput(
            f"state IDs must lie in [0, {model.n_states}), "
            f"got range [{ids.min()}, {ids.max()}]")
    with torch.no_grad():
        out = model.phonetic(torch.from_numpy(ids).unsqueeze(0),
                             _spk_tensor(speaker_emb))
    return out[0]


def decode_frames(model, ref_latent, phon_seq, log_f0, speaker_emb):
    """Decode per-frame conditioning into a mel spectrogram.

    All sequence inputs must share one frame count; the output has exactly
    that many frames.  The log-f0 channel is centered on its own mean, so
    it carries the contour shape only; the pitch level is rendered from
    the speaker embedding.
    """
    ref = torch.as_tensor(ref_latent, dtype=torch.float32)
    phon = torch.as_tensor(phon_seq, dtype=torch.float32)
    f0 = np.asarray(getattr(log_f0, "log_f0", log_f0), dtype=np.float32)
    f0 = torch.from_numpy((f0 - f0.mean()).reshape(-1))
    t = ref.shape[0]
    if phon.shape[0] != t or f0.shape[0] != t:
        raise InvalidInput(
            f"sequence lengths disagree: latent {t}, phonetic "
            f"{phon.shape[0]}, log_f0 {f0.shape[0]}")
    with torch.no_grad():
        pred = model.decode(ref.unsqueeze(0), phon.unsqueeze(0),
                            f0.unsqueeze(0), _spk_tensor(speaker_emb))
    utterance_id = getattr(log_f0, "utterance_id", "")
    return MelSpectrogram(pred[0].numpy().astype(np.float64),
                          utterance_id=utterance_id)


def kl_divergence(latent: VcLatent) -> torch.Tensor:
    """Mean over latent frames of the per-frame KL to a standard normal."""
    mu, ls = latent.mu, latent.log_sigma
    per_frame = -0.5 * (1 + 2 * ls - mu ** 2 - torch.exp(2 * ls)).sum(dim=-1)
    return per_frame.mean()


@dataclass
class VcLossParts:
    total: torch.Tensor
    l1: torch.Tensor
    kl: torch.Tensor


def vc_loss(pred_mel, target_mel, latent: VcLatent, beta: float) -> VcLossParts:
    """L1 reconstruction plus beta-weighted KL.

    total = mean |pred - target| + beta * KL(latent).
    """
    pred = torch.as_tensor(pred_mel)
    target = torch.as_tensor(target_mel)
    if pred.shape != target.shape:
        raise InvalidInput(
            f"pred and target shapes disagree: {tuple(pred.shape)} vs "
            f"{tuple(target.shape)}")
    l1 = (pred - target).abs().mean()
    kl = kl_divergence(latent)
    return VcLossParts(total=l1 + beta * kl, l1=l1, kl=kl)


def beta_schedule(step: int, total_steps: int, beta: float = BETA,
                  warmup_fraction: float = WARMUP_FRACTION) -> float:
    """Linear KL warm-up from 0 over the first fraction of training."""
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    return beta * min(1.0, step / warmup)


@dataclass
class VcTrainHistory:
    losses: list = field(default_factory=list)
    probe_l1_initial: float = float("nan")
    probe_l1_stage1: float = float("nan")
    probe_l1_final: float = float("nan")


def _check_features(manifest, features, split="train"):
    utts = [u for u in manifest.utterances if u.split == split]
    missing = [u.utterance_id for u in utts if u.utterance_id not in features]
    if missing:
        raise DataError(f"missing features for utterances: {missing}")
    return utts


def _batch_tensors(feats, embeddings, picks):
    # pad to the longest member by last-frame repetition; loss masks the tail
    chosen = [feats[i] for i in picks]
    t_max = max(f.mel.shape[0] for f in chosen)
    b = len(chosen)
    n_mels = chosen[0].mel.shape[1]
    mels = np.empty((b, t_max, n_mels), dtype=np.float32)
    states = np.empty((b, t_max), dtype=np.int64)
    f0 = np.empty((b, t_max), dtype=np.float32)
    spk = np.empty((b, embeddings[picks[0]].size), dtype=np.float32)
    lengths = np.empty(b, dtype=np.int64)
    for k, f in enumerate(chosen):
        t = f.mel.shape[0]
        lengths[k] = t
        mels[k, :t] = f.mel
        mels[k, t:] = f.mel[-1]
        states[k, :t] = f.states
        states[k, t:] = f.states[-1]
        # center per utterance: the channel carries contour shape, never
        # the speaker's pitch level (that must come from the embedding)
        centered = f.log_f0 - f.log_f0.mean()
        f0[k, :t] = centered
        f0[k, t:] = centered[-1]
        spk[k] = embeddings[picks[k]]
    return (torch.from_numpy(mels), torch.from_numpy(states),
            torch.from_numpy(f0), torch.from_numpy(spk),
            torch.from_numpy(lengths))


def _masked_loss(model, batch, beta):
    mels, states, f0, spk, lengths = batch
    pred, latent = model(mels, states, f0, spk, sample=True)
    t = mels.shape[1]
    mask = (torch.arange(t)[None, :] < lengths[:, None]).float()
    diff = (pred - mels).abs().mean(dim=-1)
    l1 = (diff * mask).sum() / mask.sum()
    t8 = latent.mu.shape[1]
    lat_lengths = (lengths + model.bottleneck - 1) // model.bottleneck
    lat_mask = (torch.arange(t8)[None, :] < lat_lengths[:, None]).float()
    per_frame = -0.5 * (1 + 2 * latent.log_sigma - latent.mu ** 2
                        - torch.exp(2 * latent.log_sigma)).sum(dim=-1)
    kl = (per_frame * lat_mask).sum() / lat_mask.sum()
    return l1 + beta * kl, l1, kl


def _run_stage(model, feats, embeddings, n_steps, batch_size, lr, beta,
               rng, history, eligible):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for step in range(n_steps):
        picks = [int(i) for i in
                 rng.choice(eligible, size=min(batch_size, len(eligible)),
                            replace=len(eligible) < batch_size)]
        batch = _batch_tensors(feats, embeddings, picks)
        total, l1, kl = _masked_loss(model, batch,
                                     beta_schedule(step, n_steps, beta))
        opt.zero_grad()
        total.backward()
        opt.step()
        history.losses.append((float(total.detach()), float(l1.detach()),
                               float(kl.detach())))


def train_vc(manifest, features, spk_encoder, target_speaker: Optional[str] = None,
             stage1_steps: int = STAGE1_STEPS, stage2_steps: int = STAGE2_STEPS,
             batch_size: int = BATCH_SIZE, stage1_lr: float = STAGE1_LR,
             stage2_lr: float = STAGE2_LR, beta: float = BETA, seed: int = 0):
    """Two-stage conversion training: all speakers, then target-only.

    Parameters
    ----------
    manifest : corpus manifest
    features : dict mapping utterance_id to UtteranceFeatures
    spk_encoder : trained SpeakerEncoder for per-utterance embeddings
    target_speaker : fine-tune speaker; defaults to the manifest's
        speaker with role "target"

    Returns
    -------
    (model, history) with per-step (total, l1, kl) tuples and probe-batch
    L1 before training, after stage 1 and after stage 2.
    """
    check_non_negative_int(stage1_steps, "stage1_steps")
    check_non_negative_int(stage2_steps, "stage2_steps")
    utts = _check_features(manifest, features)
    if target_speaker is None:
        targets = [spk for spk, row in manifest.speakers.items()
                   if row.get("role") == "target"]
        if len(targets) != 1:
            raise InvalidInput(
                "target_speaker not given and the manifest does not name "
                "exactly one target-role speaker")
        target_speaker = targets[0]

    torch.manual_seed(seed)
    feats = [features[u.utterance_id] for u in utts]
    model = VcModel(n_mels=feats[0].mel.shape[1])
    embeddings = [
        embed_utterance(spk_encoder, f.mel).vector.astype(np.float32)
        for f in feats
    ]

    all_idx = np.arange(len(feats))
    target_idx = np.array([i for i, f in enumerate(feats)
                           if f.speaker_id == target_speaker])
    if target_idx.size == 0:
        raise DataError(f"no training features for target speaker "
                        f"{target_speaker!r}")

    probe_rng = np.random.default_rng(seed)
    probe_picks = [int(i) for i in probe_rng.choice(
        all_idx, size=min(batch_size, len(feats)), replace=False)]
    probe = _batch_tensors(feats, embeddings, probe_picks)

    def _probe_l1():
        with torch.no_grad():
            _, l1, _ = _masked_loss(model, probe, beta=0.0)
        return float(l1)

    history = VcTrainHistory(probe_l1_initial=_probe_l1())
    rng = np.random.default_rng(seed + 1)
    _run_stage(model, feats, embeddings, stage1_steps, batch_size,
               stage1_lr, beta, rng, history, all_idx)
    history.probe_l1_stage1 = _probe_l1()
    _run_stage(model, feats, embeddings, stage2_steps, batch_size,
               stage2_lr, beta, rng, history, target_idx)
    history.probe_l1_final = _probe_l1()
    return model, history


def convert_utterance(model, source: UtteranceFeatures,
                      source_assets: SpeakerAssets,
                      target_assets: SpeakerAssets) -> MelSpectrogram:
    """Convert one utterance to the target speaker's voice.

    The reference and phonetic encoders read the source utterance; the
    decoder is conditioned on the target centroid and the source log-f0
    shifted from the source speaker's mean to the target's.  Frame count
    is preserved exactly.
    """
    track = F0Track(log_f0=source.log_f0,
                    voiced=np.ones(source.log_f0.size, dtype=bool),
                    utterance_id=source.utterance_id)
    shifted = normalize_log_f0(track, source_assets.log_f0_mean,
                               target_assets.log_f0_mean)
    source_spk = source_assets.centroid
    ref_up, _ = encode_reference(model, source.mel, source_spk, sample=False)
    phon = encode_phonetic(model, source.states, source_spk)
    out = decode_frames(model, ref_up, phon, shifted,
                        target_assets.centroid)
    out.utterance_id = source.utterance_id
    return out


def save_model(model: VcModel, prefix):
    tensors = {name: p.detach().numpy()
               for name, p in model.state_dict().items()}
    featio.save_tensors(prefix, tensors, header_extra={
        "n_mels": model.n_mels, "n_states": model.n_states,
        "spk_dim": model.spk_dim, "latent_dim": model.latent_dim,
        "bottleneck": model.bottleneck,
    })


def load_model(prefix) -> VcModel:
    tensors, header = featio.load_tensors(prefix)
    model = VcModel(n_mels=int(header["n_mels"]),
                    n_states=int(header["n_states"]),
                    spk_dim=int(header["spk_dim"]),
                    latent_dim=int(header["latent_dim"]),
                    bottleneck=int(header["bottleneck"]))
    model.load_state_dict({name: torch.from_numpy(np.array(v))
                           for name, v in tensors.items()})
    return model


class VoiceConverter(BaseEstimator):
    """Estimator wrapper: fit trains the model, transform converts."""

    def __init__(self, stage1_steps=STAGE1_STEPS, stage2_steps=STAGE2_STEPS,
                 batch_size=BATCH_SIZE, stage1_lr=STAGE1_LR,
                 stage2_lr=STAGE2_LR, beta=BETA, target_speaker=None, seed=0):
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.batch_size = batch_size
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.beta = beta
        self.target_speaker = target_speaker
        self.seed = seed
        self.model_ = None
        self.history_ = None

    def fit(self, manifest, features, spk_encoder):
        self.model_, self.history_ = train_vc(
            manifest, features, spk_encoder,
            target_speaker=self.target_speaker,
            stage1_steps=self.stage1_steps, stage2_steps=self.stage2_steps,
            batch_size=self.batch_size, stage1_lr=self.stage1_lr,
            stage2_lr=self.stage2_lr, beta=self.beta, seed=self.seed)
        return self

    def transform(self, sources, source_assets, target_assets):
        check_fitted(self, ["model_"])
        return [convert_utterance(self.model_, s, source_assets, target_assets)
                for s in sources]
