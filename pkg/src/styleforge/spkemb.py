"""Speaker embeddings trained with a generalized end-to-end softmax loss.

A small recurrent encoder maps a mel spectrogram to a unit-norm vector.
Training pulls each utterance toward its own speaker centroid and away
from the other speakers' centroids in the batch.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator

from . import featio
from .errors import InvalidBatch, InvalidInput, NormZero
from .validation import check_array_2d, check_fitted, check_non_negative_int

EMBEDDING_DIM = 64
HIDDEN_SIZE = 128
N_RNN_LAYERS = 2
SCALE_MIN = 1e-6

BATCH_SPEAKERS = 4
BATCH_UTTERANCES = 4
CROP_FRAMES = 80
TRAIN_STEPS = 3000
LEARNING_RATE = 1e-3


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    speaker_id: str = ""
    utterance_id: Optional[str] = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)


class SpeakerEncoder(nn.Module):
    """Mel frames -> unit-norm embedding, plus the trainable loss scale."""

    def __init__(self, n_mels: int = 80, hidden: int = HIDDEN_SIZE,
                 dim: int = EMBEDDING_DIM):
        super().__init__()
        self.n_mels = n_mels
        self.dim = dim
        self.rnn = nn.LSTM(n_mels, hidden, num_layers=N_RNN_LAYERS,
                           batch_first=True)
        self.proj = nn.Linear(hidden, dim)
        self.w = nn.Parameter(torch.tensor(10.0))
        self.b = nn.Parameter(torch.tensor(-5.0))

    def forward(self, mels: torch.Tensor) -> torch.Tensor:
        # (batch, frames, n_mels) -> (batch, dim), rows unit-norm
        _, (h, _) = self.rnn(mels)
        e = self.proj(h[-1])
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def _as_mel_array(mel):
    frames = getattr(mel, "frames", mel)
    return check_array_2d(np.asarray(frames, dtype=np.float64), "mel")


def embed_utterance(encoder, mel, speaker_id="", utterance_id=None):
    """Embed one mel spectrogram with a trained encoder.

    Parameters
    ----------
    encoder : SpeakerEncoder
    mel : MelSpectrogram or ndarray, shape (n_frames, n_mels)

    Returns
    -------
    SpeakerEmbedding with a unit-norm 1-D vector.
    """
    frames = _as_mel_array(mel)
    if frames.shape[0] < 1:
        raise InvalidInput("mel must contain at least one frame")
    with torch.no_grad():
        x = torch.from_numpy(frames).float().unsqueeze(0)
        vec = encoder(x)[0].numpy().astype(np.float64)
    vec = vec / np.linalg.norm(vec)
    if utterance_id is None:
        utterance_id = getattr(mel, "utterance_id", None) or None
    return SpeakerEmbedding(vector=vec, speaker_id=speaker_id,
                            utterance_id=utterance_id)


def ge2e_loss(embeddings: torch.Tensor, w: torch.Tensor,
              b: torch.Tensor) -> torch.Tensor:
    """Softmax generalized end-to-end loss.

    Parameters
    ----------
    embeddings : tensor, shape (n_speakers, n_utterances, dim)
        Utterance embeddings grouped by speaker.
    w, b : scalar tensors
        Similarity scale and bias; w must stay positive.

    Returns
    -------
    Scalar loss, summed over all utterances.

    Notes
    -----
    The similarity of utterance (j, i) to speaker k is w * cos + b
    against speaker k's centroid; for k == j the centroid excludes the
    utterance itself.  Centroids are renormalized to unit length.
    """
    if embeddings.dim() != 3:
        raise InvalidBatch("embeddings must have shape "
                           "(n_speakers, n_utterances, dim)")
    n_spk, n_utt, _ = embeddings.shape
    if n_spk < 2:
        raise InvalidBatch("need at least 2 speakers per batch")
    if n_utt < 2:
        raise InvalidBatch("need at least 2 utterances per speaker")

    def _unit(x):
        return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    e = _unit(embeddings)
    centroids = _unit(e.mean(dim=1))                      # (n_spk, dim)
    loo = _unit((e.sum(dim=1, keepdim=True) - e) / (n_utt - 1))

    sim = w * torch.einsum("jid,kd->jik", e, centroids) + b
    own = w * (e * loo).sum(dim=-1) + b
    j = torch.arange(n_spk)
    sim = sim.clone()
    sim[j, :, j] = own
    return (torch.logsumexp(sim, dim=-1) - own).sum()


def speaker_centroid(embeddings) -> SpeakerEmbedding:
    """Unit-normalized mean of one speaker's utterance embeddings.

    Raises
    ------
    InvalidInput if the set is empty, NormZero if the mean vanishes.
    """
    embeddings = list(embeddings)
    if not embeddings:
        raise InvalidInput("cannot take the centroid of zero embeddings")
    vectors = np.stack([
        e.vector if isinstance(e, SpeakerEmbedding) else np.asarray(e)
        for e in embeddings
    ])
    mean = vectors.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-9:
        raise NormZero("embedding mean has zero norm")
    speaker_ids = {e.speaker_id for e in embeddings
                   if isinstance(e, SpeakerEmbedding)}
    speaker_id = speaker_ids.pop() if len(speaker_ids) == 1 else ""
    return SpeakerEmbedding(vector=mean / norm, speaker_id=speaker_id,
                            utterance_id=None)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    probe_initial: float = float("nan")
    probe_final: float = float("nan")


def _group_by_speaker(manifest, mels, min_utts):
    groups = {}
    for utt in manifest.utterances:
        if utt.split != "train" or utt.utterance_id not in mels:
            continue
        groups.setdefault(utt.speaker_id, []).append(utt.utterance_id)
    return {spk: ids for spk, ids in sorted(groups.items())
            if len(ids) >= min_utts}


def _build_batch(groups, mels, rng, n_spk, n_utt, crop):
    speakers = rng.choice(sorted(groups), size=n_spk, replace=False)
    chunks = []
    for spk in speakers:
        ids = groups[spk]
        picks = rng.choice(len(ids), size=n_utt, replace=False)
        for p in picks:
            frames = mels[ids[p]]
            frames = getattr(frames, "frames", frames)
            length = min(crop, frames.shape[0])
            start = int(rng.integers(0, frames.shape[0] - length + 1))
            chunks.append(frames[start:start + length])
    length = min(c.shape[0] for c in chunks)
    batch = np.stack([c[:length] for c in chunks]).astype(np.float32)
    return torch.from_numpy(batch).reshape(n_spk, n_utt, length, -1)


def train_speaker_encoder(manifest, mels, n_steps: int = TRAIN_STEPS,
                          batch_speakers: int = BATCH_SPEAKERS,
                          batch_utterances: int = BATCH_UTTERANCES,
                          crop_frames: int = CROP_FRAMES,
                          lr: float = LEARNING_RATE, seed: int = 0):
    """Train a speaker encoder on the training split of a corpus.

    Parameters
    ----------
    manifest : corpus manifest
    mels : dict mapping utterance_id to mel frames
    n_steps : number of optimization steps

    Returns
    -------
    (encoder, history) where history holds the per-step losses and the
    loss on a fixed probe batch before and after training.
    """
    check_non_negative_int(n_steps, "n_steps")
    if batch_speakers < 2 or batch_utterances < 2:
        raise InvalidBatch("batches need >= 2 speakers and >= 2 utterances "
                           "per speaker")
    groups = _group_by_speaker(manifest, mels, batch_utterances)
    if len(groups) < batch_speakers:
        raise InvalidBatch(
            f"need {batch_speakers} speakers with >= {batch_utterances} "
            f"training utterances, found {len(groups)}")

    torch.manual_seed(seed)
    sample = next(iter(mels.values()))
    n_mels = getattr(sample, "frames", sample).shape[1]
    encoder = SpeakerEncoder(n_mels=n_mels)

    probe_rng = np.random.default_rng(seed)
    probe = _build_batch(groups, mels, probe_rng, batch_speakers,
                         batch_utterances, crop_frames)

    def _probe_loss():
        with torch.no_grad():
            e = encoder(probe.reshape(-1, *probe.shape[2:]))
            e = e.reshape(batch_speakers, batch_utterances, -1)
            return float(ge2e_loss(e, encoder.w, encoder.b))

    history = TrainHistory(probe_initial=_probe_loss())
    rng = np.random.default_rng(seed + 1)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    for _ in range(n_steps):
        batch = _build_batch(groups, mels, rng, batch_speakers,
                             batch_utterances, crop_frames)
        e = encoder(batch.reshape(-1, *batch.shape[2:]))
        e = e.reshape(batch_speakers, batch_utterances, -1)
        loss = ge2e_loss(e, encoder.w, encoder.b)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(encoder.parameters(), 3.0)
        opt.step()
        with torch.no_grad():
            encoder.w.clamp_(min=SCALE_MIN)
        history.losses.append(float(loss.detach()))
    history.probe_final = _probe_loss()
    return encoder, history


def save_encoder(encoder: SpeakerEncoder, prefix):
    tensors = {name: p.detach().numpy()
               for name, p in encoder.state_dict().items()}
    featio.save_tensors(prefix, tensors,
                        header_extra={"n_mels": encoder.n_mels,
                                      "dim": encoder.dim})


def load_encoder(prefix) -> SpeakerEncoder:
    tensors, header = featio.load_tensors(prefix)
    encoder = SpeakerEncoder(n_mels=int(header["n_mels"]),
                             dim=int(header["dim"]))
    state = {name: torch.from_numpy(np.array(value))
             for name, value in tensors.items()}
    encoder.load_state_dict(state)
    return encoder


class SpeakerEmbedder(BaseEstimator):
    """Estimator wrapper: fit trains the encoder, transform embeds mels."""

    def __init__(self, n_steps=TRAIN_STEPS, batch_speakers=BATCH_SPEAKERS,
                 batch_utterances=BATCH_UTTERANCES, crop_frames=CROP_FRAMES,
                 lr=LEARNING_RATE, seed=0):
        self.n_steps = n_steps
        self.batch_speakers = batch_speakers
        self.batch_utterances = batch_utterances
        self.crop_frames = crop_frames
        self.lr = lr
        self.seed = seed
        self.encoder_ = None
        self.history_ = None

    def fit(self, manifest, mels):
        self.encoder_, self.history_ = train_speaker_encoder(
            manifest, mels, n_steps=self.n_steps,
            batch_speakers=self.batch_speakers,
            batch_utterances=self.batch_utterances,
            crop_frames=self.crop_frames, lr=self.lr, seed=self.seed)
        return self

    def transform(self, mels):
        check_fitted(self, ["encoder_"])
        return [embed_utterance(self.encoder_, mel) for mel in mels]
