"""Monophone HMM training and Viterbi forced alignment.

Each phone is a 3-state left-to-right chain without skips; emissions are
single diagonal-covariance Gaussians over MFCC frames.  Training is
segmental: align with the current model, re-estimate Gaussians and
self-loop probabilities from the aligned segments, repeat.  Total Viterbi
log-likelihood is non-decreasing across iterations up to the variance
floor and transition clamps.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import ALIGNABLE_PHONES, STRESS_MARKERS
from .errors import AlignmentInfeasible, InvalidInput, MissingPhone
from .validation import check_fitted

STATES_PER_PHONE = 3
VAR_FLOOR = 1e-4
SELF_LOOP_MIN = 1e-3
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MonophoneHmm:
    phones: list                # ordered phone inventory
    means: np.ndarray           # (n_phones * 3, D)
    variances: np.ndarray       # (n_phones * 3, D), floored
    self_loops: np.ndarray      # (n_phones * 3,), clamped to (0, 1)
    history: list = field(default_factory=list)  # training log-likelihoods
    skipped: list = field(default_factory=list)  # infeasible utterance ids

    @property
    def n_states(self):
        return len(self.phones) * STATES_PER_PHONE

    def state_id(self, phone, state):
        return self.phones.index(phone) * STATES_PER_PHONE + state

    def phone_of_state(self, state_id):
        return self.phones[state_id // STATES_PER_PHONE]


@dataclass
class StateSequence:
    state_ids: np.ndarray
    utterance_id: str = ""
    log_prob: float = float("nan")
    chain_positions: np.ndarray = None  # position in the utterance chain

    def __post_init__(self):
        self.state_ids = np.asarray(self.state_ids, dtype=np.int64).reshape(-1)
        if self.chain_positions is not None:
            self.chain_positions = np.asarray(
                self.chain_positions, dtype=np.int64
            ).reshape(-1)


def strip_stress(tokens):
    """Alignable phone chain: every token except stress markers."""
    return [t for t in tokens if t not in STRESS_MARKERS]


def _uniform_segments(n_frames, n_states):
    """Lengths of n_states contiguous segments covering n_frames as evenly
    as possible; the first n_frames % n_states segments get the extra frame."""
    base, extra = divmod(n_frames, n_states)
    return [base + (1 if i < extra else 0) for i in range(n_states)]


def flat_start_init(manifest, mfccs, phones=None):
    """Initialize a model by uniform segmentation of every utterance.

    `mfccs` maps utterance_id to a (T, D) array.  Each utterance is split
    evenly across its phone chain's states; per-state Gaussians are the
    sample mean and variance of the frames that landed there.  Raises
    MissingPhone when an inventory phone never occurs.
    """
    if phones is None:
        phones = list(ALIGNABLE_PHONES)
    phones = list(phones)
    index = {p: i for i, p in enumerate(phones)}
    dim = next(iter(mfccs.values())).shape[1]
    n_states = len(phones) * STATES_PER_PHONE
    sums = np.zeros((n_states, dim))
    sq_sums = np.zeros((n_states, dim))
    counts = np.zeros(n_states)
    for utt in manifest.utterances:
        chain = strip_stress(utt.phones)
        frames = np.asarray(mfccs[utt.utterance_id], dtype=np.float64)
        n_chain_states = len(chain) * STATES_PER_PHONE
        if frames.shape[0] < n_chain_states:
            continue  # too short for flat start; training will report it
        lengths = _uniform_segments(frames.shape[0], n_chain_states)
        cursor = 0
        for pos, length in enumerate(lengths):
            phone = chain[pos // STATES_PER_PHONE]
            if phone not in index:
                raise InvalidInput(f"phone {phone!r} not in model inventory")
            sid = index[phone] * STATES_PER_PHONE + pos % STATES_PER_PHONE
            seg = frames[cursor : cursor + length]
            sums[sid] += seg.sum(axis=0)
            sq_sums[sid] += (seg**2).sum(axis=0)
            counts[sid] += length
            cursor += length
    absent = sorted(
        {phones[sid // STATES_PER_PHONE] for sid in np.flatnonzero(counts == 0)}
    )
    if absent:
        raise MissingPhone(f"phones never observed in training data: {absent}")
    means = sums / counts[:, None]
    variances = np.maximum(sq_sums / counts[:, None] - means**2, VAR_FLOOR)
    self_loops = np.full(n_states, 0.5)
    return MonophoneHmm(
        phones=phones, means=means, variances=variances, self_loops=self_loops
    )


def _chain_state_ids(model, chain):
    ids = np.empty(len(chain) * STATES_PER_PHONE, dtype=np.int64)
    for i, phone in enumerate(chain):
        try:
            base = model.phones.index(phone) * STATES_PER_PHONE
        except ValueError:
            raise InvalidInput(f"phone {phone!r} not in model inventory") from None
        ids[i * STATES_PER_PHONE : (i + 1) * STATES_PER_PHONE] = (
            base + np.arange(STATES_PER_PHONE)
        )
    return ids


def _emission_log_probs(model, frames, chain_ids):
    mu = model.means[chain_ids]            # (S, D)
    var = model.variances[chain_ids]       # (S, D)
    const = -0.5 * np.sum(_LOG_2PI + np.log(var), axis=1)          # (S,)
    diff = frames[:, None, :] - mu[None, :, :]                     # (T, S, D)
    return const[None, :] - 0.5 * np.sum(diff**2 / var[None, :, :], axis=2)


def force_align(model, phones, mfcc):
    """Best state path through the utterance's left-to-right chain.

    `phones` may include stress markers; they carry no frames and are
    dropped.  Ties between staying and advancing prefer the self-loop.
    Returns a StateSequence of global state IDs with the path log
    probability attached.
    """
    chain = strip_stress(phones)
    if not chain:
        raise InvalidInput("empty phone sequence")
    frames = np.asarray(mfcc, dtype=np.float64)
    if frames.ndim != 2:
        raise InvalidInput(f"mfcc must be 2-D, got shape {frames.shape}")
    chain_ids = _chain_state_ids(model, chain)
    n_frames, n_states = frames.shape[0], chain_ids.size
    if n_frames < n_states:
        raise AlignmentInfeasible(
            f"{n_frames} frames cannot traverse {n_states} states "
            f"({len(chain)} phones x {STATES_PER_PHONE})"
        )
    emis = _emission_log_probs(model, frames, chain_ids)
    self_p = np.clip(model.self_loops[chain_ids], SELF_LOOP_MIN, 1 - SELF_LOOP_MIN)
    log_self = np.log(self_p)
    log_adv = np.log1p(-self_p)

    delta = np.full((n_frames, n_states), -np.inf)
    stayed = np.zeros((n_frames, n_states), dtype=bool)
    delta[0, 0] = emis[0, 0]
    for t in range(1, n_frames):
        stay = delta[t - 1] + log_self
        advance = np.concatenate(([-np.inf], delta[t - 1, :-1] + log_adv[:-1]))
        take_stay = stay >= advance  # tie prefers the self-loop
        delta[t] = emis[t] + np.where(take_stay, stay, advance)
        stayed[t] = take_stay
    path = np.empty(n_frames, dtype=np.int64)
    path[-1] = n_states - 1
    for t in range(n_frames - 1, 0, -1):
        path[t - 1] = path[t] if stayed[t, path[t]] else path[t] - 1
    return StateSequence(
        state_ids=chain_ids[path],
        log_prob=float(delta[-1, -1]),
        chain_positions=path,
    )


def viterbi_train(model, manifest, mfccs, n_iters=5):
    """Segmental Viterbi re-estimation.

    Returns a new model whose `history` holds the total alignment
    log-likelihood of each iteration (evaluated with that iteration's
    input model).  Utterances too short for their chain are skipped and
    listed in `model.skipped`.
    """
    model = MonophoneHmm(
        phones=list(model.phones),
        means=model.means.copy(),
        variances=model.variances.copy(),
        self_loops=model.self_loops.copy(),
        history=list(model.history),
    )
    skipped = []
    dim = model.means.shape[1]
    for _ in range(n_iters):
        total_ll = 0.0
        sums = np.zeros((model.n_states, dim))
        sq_sums = np.zeros((model.n_states, dim))
        counts = np.zeros(model.n_states)
        stays = np.zeros(model.n_states)
        exits = np.zeros(model.n_states)
        skipped = []
        for utt in manifest.utterances:
            frames = np.asarray(mfccs[utt.utterance_id], dtype=np.float64)
            try:
                seq = force_align(model, utt.phones, frames)
            except AlignmentInfeasible:
                skipped.append(utt.utterance_id)
                continue
            total_ll += seq.log_prob
            ids = seq.state_ids
            np.add.at(sums, ids, frames)
            np.add.at(sq_sums, ids, frames**2)
            np.add.at(counts, ids, 1.0)
            same = ids[1:] == ids[:-1]
            np.add.at(stays, ids[1:][same], 1.0)
            np.add.at(exits, ids[:-1][~same], 1.0)
        seen = counts > 0
        means = model.means.copy()
        variances = model.variances.copy()
        means[seen] = sums[seen] / counts[seen, None]
        variances[seen] = np.maximum(
            sq_sums[seen] / counts[seen, None] - means[seen] ** 2, VAR_FLOOR
        )
        trans_total = stays + exits
        self_loops = model.self_loops.copy()
        has_trans = trans_total > 0
        self_loops[has_trans] = stays[has_trans] / trans_total[has_trans]
        self_loops = np.clip(self_loops, SELF_LOOP_MIN, 1 - SELF_LOOP_MIN)
        model.means, model.variances, model.self_loops = (
            means, variances, self_loops,
        )
        model.history.append(total_ll)
    model.skipped = skipped
    return model


def upsample_states(seq, target_t):
    """Repeat states to a longer frame grid, preserving order and
    proportions: frame t maps to source index floor(t * len / target_t)."""
    n = seq.state_ids.size
    if target_t < n:
        raise InvalidInput(f"target length {target_t} < sequence length {n}")
    idx = (np.arange(target_t) * n) // target_t
    return StateSequence(
        state_ids=seq.state_ids[idx],
        utterance_id=seq.utterance_id,
        log_prob=seq.log_prob,
        chain_positions=(
            None if seq.chain_positions is None else seq.chain_positions[idx]
        ),
    )


def save_model(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "phones": list(model.phones),
        "states_per_phone": STATES_PER_PHONE,
        "means": model.means.tolist(),
        "variances": model.variances.tolist(),
        "self_loops": model.self_loops.tolist(),
        "history": [float(h) for h in model.history],
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_model(path):
    with open(path) as f:
        payload = json.load(f)
    return MonophoneHmm(
        phones=list(payload["phones"]),
        means=np.asarray(payload["means"], dtype=np.float64),
        variances=np.asarray(payload["variances"], dtype=np.float64),
        self_loops=np.asarray(payload["self_loops"], dtype=np.float64),
        history=list(payload["history"]),
    )


class MonophoneAligner(BaseEstimator):
    """Estimator wrapper: fit trains the HMM set, predict aligns.

    Parameters
    ----------
    n_iters : int
        Segmental training iterations after flat start.
    phones : sequence or None
        Phone inventory; None uses the project-wide alignable set.
    """

    def __init__(self, n_iters=5, phones=None):
        self.n_iters = n_iters
        self.phones = phones

    def fit(self, manifest, mfccs):
        init = flat_start_init(manifest, mfccs, phones=self.phones)
        self.model_ = viterbi_train(init, manifest, mfccs, n_iters=self.n_iters)
        return self

    def predict(self, phones, mfcc):
        check_fitted(self, "model_")
        return force_align(self.model_, phones, mfcc)
