"""End-to-end orchestration: corpus to evaluation, resumable by stage.

Stages run in a fixed order (generate, features, align, spkemb, vc,
convert, pool, tts, centroids, synthesize, evaluate).  Each completed
stage leaves a marker holding an input hash, a fresh run id, and its
artifact list; a stage re-executes when its marker is missing, its
inputs changed, any artifact disappeared, or a parent re-executed.
Partial outputs are preserved when a stage fails.

Reproducibility: the master seed fans out to per-stage seeds as the
first four bytes (big endian) of sha256("<seed>:<stage>"), so a stage
re-run in isolation sees the same seed as in a full run.  The
STYLEFORGE_SEED environment variable overrides the configured master
seed.
"""

import hashlib
import json
import os
import time
import uuid
import warnings
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import align, corpus, dsp, evaluation, spkemb, tts, vc
from .config import ExperimentConfig, save_config
from .corpus import STYLE_NEUTRAL, ConvertedUtterance, Manifest, PooledItem
from .dsp import AudioClip, F0Track, MelSpectrogram
from .errors import PipelineLocked, StageError
from .spkemb import embed_utterance, speaker_centroid
from .tts import StyleVector
from .vc import SpeakerAssets, UtteranceFeatures

STAGE_ORDER = (
    ("generate", ()),
    ("features", ("generate",)),
    ("align", ("features",)),
    ("spkemb", ("features",)),
    ("vc", ("align", "spkemb")),
    ("convert", ("vc",)),
    ("pool", ("convert",)),
    ("tts", ("pool",)),
    ("centroids", ("tts",)),
    ("synthesize", ("centroids",)),
    ("evaluate", ("synthesize",)),
)

STAGE_NAMES = tuple(name for name, _ in STAGE_ORDER)


def resolve_seed(cfg: ExperimentConfig) -> int:
    env = os.environ.get("STYLEFORGE_SEED")
    return int(env) if env else cfg.seed


def derive_seed(master_seed: int, label: str) -> int:
    """Per-stage seed: first 4 bytes of sha256("<seed>:<label>")."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class RunResult:
    out_dir: Path
    executed: list = field(default_factory=list)
    stage_durations: dict = field(default_factory=dict)


class PipelineRun:
    """One pipeline execution over an output directory."""

    def __init__(self, cfg: ExperimentConfig, log=None):
        self.cfg = cfg
        self.seed = resolve_seed(cfg)
        self.out = Path(cfg.out_dir)
        self.log = log or (lambda msg: None)
        self._cache = {}

    # -- paths and cached loaders ------------------------------------

    def p(self, rel) -> Path:
        return self.out / rel

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    @property
    def manifest(self) -> Manifest:
        return self._cached("manifest", lambda: corpus.load_manifest(
            self.p("corpus/manifest.jsonl")))

    def mel(self, uid) -> np.ndarray:
        return np.load(self.p(f"features/mels/{uid}.npy"))

    def mfcc(self, uid) -> np.ndarray:
        return np.load(self.p(f"features/mfcc/{uid}.npy"))

    def f0(self, uid):
        arr = np.load(self.p(f"features/f0/{uid}.npy"))
        return arr[0], arr[1] > 0.5

    @property
    def f0_means(self) -> dict:
        return self._cached("f0_means", lambda: json.loads(
            self.p("features/f0_means.json").read_text()))

    def states(self, uid) -> np.ndarray:
        return np.load(self.p(f"align/states/{uid}.npy"))

    @property
    def encoder(self):
        return self._cached("encoder", lambda: spkemb.load_encoder(
            self.p("spkemb/encoder")))

    @property
    def speaker_centroids(self) -> dict:
        raw = self._cached("speaker_centroids", lambda: json.loads(
            self.p("spkemb/centroids.json").read_text()))
        return {k: np.asarray(v, dtype=np.float64) for k, v in raw.items()}

    @property
    def vc_model(self):
        return self._cached("vc_model",
                            lambda: vc.load_model(self.p("vc/model")))

    @property
    def converted_index(self) -> list:
        return self._cached("converted_index", lambda: json.loads(
            self.p("converted/index.json").read_text()))

    @property
    def pooled_items(self) -> list:
        rows = self._cached("pooled_index", lambda: json.loads(
            self.p("pooled/index.json").read_text()))
        return [PooledItem(**row) for row in rows]

    @property
    def tts_model(self):
        return self._cached("tts_model",
                            lambda: tts.load_model(self.p("tts/model")))

    @property
    def style_centroids(self) -> dict:
        raw = self._cached("style_centroids", lambda: json.loads(
            self.p("tts/centroids.json").read_text()))
        return {label: StyleVector(np.asarray(z, dtype=np.float64),
                                   label=label)
                for label, z in raw.items()}

    def features_for(self, utt) -> UtteranceFeatures:
        uid = utt.utterance_id
        log_f0, _ = self.f0(uid)
        return UtteranceFeatures(utterance_id=uid,
                                 speaker_id=utt.speaker_id,
                                 mel=self.mel(uid),
                                 states=self.states(uid),
                                 log_f0=log_f0)

    def speaker_assets(self, speaker_id) -> SpeakerAssets:
        return SpeakerAssets(centroid=self.speaker_centroids[speaker_id],
                             log_f0_mean=self.f0_means[speaker_id])

    def _vocoder(self):
        return partial(dsp.griffin_lim_invert,
                       iterations=self.cfg.gl_iterations)

    # -- stages ------------------------------------------------------

    def stage_generate(self):
        man = corpus.generate_synthetic_corpus(
            self.p("corpus"),
            seed=self.seed_for("generate"),
            n_speakers=self.cfg.n_speakers,
            utterances_per_speaker={
                "target": self.cfg.target_utterances,
                "supporting": self.cfg.utterances_per_supporting,
            },
            styles=tuple(self.cfg.styles),
        )
        arts = ["corpus/manifest.jsonl", "corpus/speakers.json"]
        arts += [f"corpus/{u.audio_path}" for u in man.utterances]
        return arts

    def stage_features(self):
        man = self.manifest
        arts = []
        tracks_by_speaker = {}
        for utt in man.utterances:
            uid = utt.utterance_id
            clip = AudioClip(corpus.read_wav(man.audio_file(utt)),
                             utterance_id=uid)
            mel = dsp.mel_spectrogram(clip)
            mf = dsp.mfcc(clip)
            track = dsp.estimate_f0(clip)
            for sub, data in (("mels", mel.frames), ("mfcc", mf.frames),
                              ("f0", np.stack([track.log_f0,
                                               track.voiced.astype(
                                                   np.float64)]))):
                rel = f"features/{sub}/{uid}.npy"
                path = self.p(rel)
                path.parent.mkdir(parents=True, exist_ok=True)
                np.save(path, data)
                arts.append(rel)
            if utt.split == "train":
                tracks_by_speaker.setdefault(utt.speaker_id, []).append(track)
        means = {spk: dsp.speaker_log_f0_mean(tracks)
                 for spk, tracks in sorted(tracks_by_speaker.items())}
        _write_json(self.p("features/f0_means.json"), means)
        arts.append("features/f0_means.json")
        return arts

    def stage_align(self):
        man = self.manifest
        mfccs = {u.utterance_id: self.mfcc(u.utterance_id)
                 for u in man.utterances}
        train_man = Manifest(utterances=man.subset(split="train"),
                             speakers=man.speakers, root=man.root)
        model = align.flat_start_init(train_man, mfccs)
        model = align.viterbi_train(model, train_man, mfccs,
                                    n_iters=self.cfg.align_iterations)
        align.save_model(model, self.p("align/model.json"))
        arts = ["align/model.json"]
        for utt in man.utterances:
            uid = utt.utterance_id
            seq = align.force_align(model, utt.phones, mfccs[uid])
            n_mel = self.mel(uid).shape[0]
            if seq.state_ids.size != n_mel:
                seq = align.upsample_states(seq, n_mel)
            rel = f"align/states/{uid}.npy"
            self.p(rel).parent.mkdir(parents=True, exist_ok=True)
            np.save(self.p(rel), seq.state_ids.astype(np.int32))
            arts.append(rel)
        return arts

    def stage_spkemb(self):
        man = self.manifest
        mels = {u.utterance_id: self.mel(u.utterance_id)
                for u in man.utterances}
        encoder, history = spkemb.train_speaker_encoder(
            man, mels,
            n_steps=self.cfg.spkemb_steps,
            batch_speakers=self.cfg.spkemb_batch_speakers,
            batch_utterances=self.cfg.spkemb_batch_utterances,
            lr=self.cfg.spkemb_lr,
            seed=self.seed_for("spkemb"),
        )
        spkemb.save_encoder(encoder, self.p("spkemb/encoder"))
        centroids = {}
        for spk in sorted(man.speakers):
            embs = [embed_utterance(encoder, mels[u.utterance_id],
                                    speaker_id=spk,
                                    utterance_id=u.utterance_id)
                    for u in man.subset(speaker_id=spk, split="train")]
            centroids[spk] = speaker_centroid(embs).vector
        _write_json(self.p("spkemb/centroids.json"), centroids)
        _write_json(self.p("spkemb/history.json"), {
            "probe_initial": history.probe_initial,
            "probe_final": history.probe_final,
            "final_loss": history.losses[-1] if history.losses else None,
        })
        return ["spkemb/encoder.sftf", "spkemb/encoder.json",
                "spkemb/centroids.json", "spkemb/history.json"]

    def stage_vc(self):
        man = self.manifest
        features = {u.utterance_id: self.features_for(u)
                    for u in man.utterances}
        model, history = vc.train_vc(
            man, features, self.encoder,
            stage1_steps=self.cfg.vc_stage1_steps,
            stage2_steps=self.cfg.vc_stage2_steps,
            batch_size=self.cfg.vc_batch_size,
            stage1_lr=self.cfg.vc_stage1_lr,
            stage2_lr=self.cfg.vc_stage2_lr,
            beta=self.cfg.vc_beta,
            seed=self.seed_for("vc"),
        )
        vc.save_model(model, self.p("vc/model"))
        _write_json(self.p("vc/history.json"), {
            "probe_l1_initial": history.probe_l1_initial,
            "probe_l1_stage1": history.probe_l1_stage1,
            "probe_l1_final": history.probe_l1_final,
        })
        return ["vc/model.sftf", "vc/model.json", "vc/history.json"]

    def stage_convert(self):
        man = self.manifest
        target = man.target_speaker
        target_assets = self.speaker_assets(target)
        model = self.vc_model
        rows = []
        arts = []
        for utt in man.utterances:
            if utt.speaker_id == target:
                continue
            feat = self.features_for(utt)
            out = vc.convert_utterance(model, feat,
                                       self.speaker_assets(utt.speaker_id),
                                       target_assets)
            vc_uid = f"vc_{utt.utterance_id}"
            rel = f"converted/{vc_uid}.npy"
            self.p(rel).parent.mkdir(parents=True, exist_ok=True)
            np.save(self.p(rel), out.frames)
            arts.append(rel)
            rows.append({
                "utterance_id": vc_uid,
                "source_utterance": utt.utterance_id,
                "source_speaker": utt.speaker_id,
                "style_label": utt.speaker_id,
                "phones": list(utt.phones),
                "split": utt.split,
                "mel_path": rel,
            })
        _write_json(self.p("converted/index.json"),
                    sorted(rows, key=lambda r: r["utterance_id"]))
        arts.append("converted/index.json")
        return arts

    def stage_pool(self):
        man = self.manifest
        target = man.target_speaker
        natural = man.subset(speaker_id=target, split="train")
        converted = [
            ConvertedUtterance(utterance_id=row["utterance_id"],
                               speaker_id=target,
                               style_label=row["style_label"],
                               mel_path=row["mel_path"],
                               phones=list(row["phones"]))
            for row in self.converted_index if row["split"] == "train"
        ]
        pool = corpus.pool_datasets(
            natural, converted, target,
            mel_path_for=lambda uid: f"features/mels/{uid}.npy")
        _write_json(self.p("pooled/index.json"), [{
            "utterance_id": it.utterance_id,
            "phones": list(it.phones),
            "mel_path": it.mel_path,
            "style_label": it.style_label,
            "origin": it.origin,
        } for it in pool])
        return ["pooled/index.json"]

    def _pooled_mels(self, items):
        return {it.utterance_id: np.load(self.p(it.mel_path))
                for it in items}

    def stage_tts(self):
        items = self.pooled_items
        mels = self._pooled_mels(items)
        model, history = tts.train_tts(
            items, mels,
            n_steps=self.cfg.tts_steps,
            batch_size=self.cfg.tts_batch_size,
            lr=self.cfg.tts_lr,
            beta=self.cfg.tts_beta,
            seed=self.seed_for("tts"),
        )
        tts.save_model(model, self.p("tts/model"))
        _write_json(self.p("tts/history.json"), {
            "probe_l1_initial": history.probe_l1_initial,
            "probe_l1_final": history.probe_l1_final,
        })
        return ["tts/model.sftf", "tts/model.json", "tts/history.json"]

    def stage_centroids(self):
        items = self.pooled_items
        mels = self._pooled_mels(items)
        model = self.tts_model
        centroids = {}
        for label in sorted({it.style_label for it in items}):
            group = [it for it in items if it.style_label == label]
            centroids[label] = tts.compute_style_centroid(
                model, group, mels).z
        _write_json(self.p("tts/centroids.json"), centroids)
        return ["tts/centroids.json"]

    def synthesis_styles(self):
        return [STYLE_NEUTRAL, self.cfg.source_speaker]

    def stage_synthesize(self):
        man = self.manifest
        model = self.tts_model
        centroids = self.style_centroids
        vocoder = self._vocoder()
        sentences = sorted(man.subset(split="test"),
                           key=lambda u: u.utterance_id)
        rows = []
        arts = []
        for utt in sentences:
            for label in self.synthesis_styles():
                seed = self.seed_for(
                    f"synthesize:{utt.utterance_id}:{label}")
                seed += self.cfg.synthesis_seed_offset
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = tts.synthesize(model, utt.phones, centroids[label],
                                         vocoder=vocoder, seed=seed)
                mel_rel = f"synth/{label}/{utt.utterance_id}.npy"
                wav_rel = f"synth/{label}/{utt.utterance_id}.wav"
                self.p(mel_rel).parent.mkdir(parents=True, exist_ok=True)
                np.save(self.p(mel_rel), res.mel.frames)
                corpus.write_wav(self.p(wav_rel), res.audio.samples)
                arts += [mel_rel, wav_rel]
                rows.append({
                    "utterance_id": utt.utterance_id,
                    "style": label,
                    "n_frames": int(res.mel.frames.shape[0]),
                    "stop_step": res.stop_step,
                    "ran_away": res.ran_away,
                    "mel_path": mel_rel,
                    "wav_path": wav_rel,
                })
        _write_json(self.p("synth/index.json"), rows)
        arts.append("synth/index.json")
        return arts

    # -- evaluation --------------------------------------------------

    def _eval_conversions(self):
        man = self.manifest
        target = man.target_speaker
        target_mean_hz = float(np.exp(self.f0_means[target]))
        centroids = self.speaker_centroids
        by_uid = {u.utterance_id: u for u in man.utterances}
        vocoder = self._vocoder()
        per_item = []
        for row in self.converted_index:
            if row["split"] == "train":
                continue
            src = by_uid[row["source_utterance"]]
            src_mel = self.mel(src.utterance_id)
            conv_mel = np.load(self.p(row["mel_path"]))
            src_log_f0, src_voiced = self.f0(src.utterance_id)

            clip = vocoder(MelSpectrogram(conv_mel))
            track = dsp.estimate_f0(clip)
            both = src_voiced[:track.voiced.size] & track.voiced
            if track.voiced.any():
                out_mean_hz = float(np.exp(
                    track.log_f0[track.voiced].mean()))
            else:
                out_mean_hz = float("nan")
            if both.sum() >= 2:
                corr = float(np.corrcoef(
                    src_log_f0[:both.size][both],
                    track.log_f0[:both.size][both])[0, 1])
            else:
                corr = float("nan")

            emb = embed_utterance(self.encoder, conv_mel).vector
            sim_target = float(emb @ centroids[target])
            sim_source = float(emb @ centroids[row["source_speaker"]])
            per_item.append({
                "utterance_id": row["utterance_id"],
                "source_speaker": row["source_speaker"],
                "split": row["split"],
                "duration_preserved":
                    conv_mel.shape[0] == src_mel.shape[0],
                "f0_mean_hz": out_mean_hz,
                "f0_mean_abs_error_hz": abs(out_mean_hz - target_mean_hz),
                "log_f0_corr": corr,
                "mcd_vs_source": evaluation.mel_cepstral_distortion(
                    conv_mel, src_mel),
                "sim_target": sim_target,
                "sim_source": sim_source,
                "closer_to_target": sim_target > sim_source,
            })
        per_item.sort(key=lambda r: r["utterance_id"])
        n = len(per_item)
        return {
            "n": n,
            "target_f0_mean_hz": target_mean_hz,
            "duration_preserved_fraction":
                float(np.mean([r["duration_preserved"] for r in per_item])),
            "converted_f0_mean_hz":
                float(np.mean([r["f0_mean_hz"] for r in per_item])),
            "f0_mean_abs_error_hz":
                float(abs(np.mean([r["f0_mean_hz"] for r in per_item])
                          - target_mean_hz)),
            "mean_log_f0_corr":
                float(np.mean([r["log_f0_corr"] for r in per_item])),
            "identity_fraction":
                float(np.mean([r["closer_to_target"] for r in per_item])),
            "mean_mcd_vs_source":
                float(np.mean([r["mcd_vs_source"] for r in per_item])),
            "per_item": per_item,
        }

    def _eval_style(self):
        rows = json.loads(self.p("synth/index.json").read_text())
        by_sentence = {}
        for row in rows:
            by_sentence.setdefault(row["utterance_id"], {})[row["style"]] = row
        conv_label = self.cfg.source_speaker
        per_sentence = []
        for uid in sorted(by_sentence):
            pair = by_sentence[uid]
            if STYLE_NEUTRAL not in pair or conv_label not in pair:
                continue
            variances = {}
            for label, row in pair.items():
                samples = corpus.read_wav(self.p(row["wav_path"]))
                track = dsp.estimate_f0(AudioClip(samples))
                voiced = track.voiced
                variances[label] = (
                    float(track.log_f0[voiced].var()) if voiced.sum() >= 2
                    else 0.0)
            per_sentence.append({
                "utterance_id": uid,
                "neutral_log_f0_var": variances[STYLE_NEUTRAL],
                "conversational_log_f0_var": variances[conv_label],
                "conversational_higher":
                    variances[conv_label] > variances[STYLE_NEUTRAL],
                "neutral_ran_away": pair[STYLE_NEUTRAL]["ran_away"],
                "conversational_ran_away": pair[conv_label]["ran_away"],
            })
        return {
            "n": len(per_sentence),
            "conversational_style": conv_label,
            "style_variance_fraction":
                float(np.mean([r["conversational_higher"]
                               for r in per_sentence]))
                if per_sentence else float("nan"),
            "runaway_fraction":
                float(np.mean([r["neutral_ran_away"]
                               or r["conversational_ran_away"]
                               for r in per_sentence]))
                if per_sentence else float("nan"),
            "per_sentence": per_sentence,
        }

    def _eval_latents(self):
        items = self.pooled_items
        mels = self._pooled_mels(items)
        model = self.tts_model
        z = []
        labels = []
        for it in sorted(items, key=lambda i: i.utterance_id):
            _, mu, _ = tts.reference_to_z(model, mels[it.utterance_id])
            z.append(mu.numpy().astype(np.float64))
            labels.append(it.style_label)
        z = np.stack(z)
        centroid_vecs = {label: sv.z
                         for label, sv in self.style_centroids.items()}
        svg_rel = "eval/latents.svg"
        self.p(svg_rel).parent.mkdir(parents=True, exist_ok=True)
        coords, _ = evaluation.latent_projection_2d(
            z, labels, centroids=centroid_vecs, path=self.p(svg_rel))
        purity = evaluation.cluster_purity(
            z, labels, k=len(set(labels)), seed=self.seed_for("evaluate"))
        return {
            "n": int(z.shape[0]),
            "labels": sorted(set(labels)),
            "purity": purity,
            "coords": coords,
            "point_labels": labels,
        }, svg_rel

    def stage_evaluate(self):
        latents, svg_rel = self._eval_latents()
        result = {
            "config": _experiment_params(self.cfg),
            "master_seed": self.seed,
            "stage_seeds": {name: self.seed_for(name)
                            for name in STAGE_NAMES},
            "vc_heldout": self._eval_conversions(),
            "tts_style": self._eval_style(),
            "latents": latents,
        }
        _write_json(self.p("eval/evaluation.json"), result)
        return ["eval/evaluation.json", svg_rel]


_STAGE_FNS = {
    "generate": PipelineRun.stage_generate,
    "features": PipelineRun.stage_features,
    "align": PipelineRun.stage_align,
    "spkemb": PipelineRun.stage_spkemb,
    "vc": PipelineRun.stage_vc,
    "convert": PipelineRun.stage_convert,
    "pool": PipelineRun.stage_pool,
    "tts": PipelineRun.stage_tts,
    "centroids": PipelineRun.stage_centroids,
    "synthesize": PipelineRun.stage_synthesize,
    "evaluate": PipelineRun.stage_evaluate,
}


def _experiment_params(cfg: ExperimentConfig) -> dict:
    # everything that shapes the results; out_dir only says where they go
    params = cfg.to_dict()
    params.pop("out_dir")
    return params


def _load_marker(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError):
        return None


def run_pipeline(cfg: ExperimentConfig, until=None, log=None) -> RunResult:
    """Execute the pipeline into cfg.out_dir, resuming where possible.

    `until` stops after the named stage (inclusive).  Returns the output
    directory plus the list of stages that actually executed.  Raises
    PipelineLocked when the directory is in use and StageError when a
    stage fails; completed stages keep their outputs either way.
    """
    if until is not None and until not in STAGE_NAMES:
        raise StageError(f"unknown stage {until!r}; "
                         f"choose from {list(STAGE_NAMES)}")
    run = PipelineRun(cfg, log=log)
    cfg = replace(cfg, seed=run.seed)
    run.cfg = cfg
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")

    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineLocked(
            f"{out} is in use (lock file {lock} exists; remove it if the "
            f"previous run crashed)") from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)

    result = RunResult(out_dir=out)
    cfg_json = json.dumps(_experiment_params(cfg), sort_keys=True)
    try:
        run_ids = {}
        for name, parents in STAGE_ORDER:
            expected = hashlib.sha256(
                (cfg_json + "|" + ",".join(run_ids[p] for p in parents))
                .encode()).hexdigest()
            marker_path = out / "markers" / f"{name}.json"
            marker = _load_marker(marker_path)
            fresh = (
                marker is not None
                and marker.get("input_hash") == expected
                and all((out / rel).exists()
                        for rel in marker.get("artifacts", []))
            )
            if not fresh:
                run.log(f"[{name}] running")
                start = time.monotonic()
                try:
                    artifacts = _STAGE_FNS[name](run)
                except Exception as exc:
                    raise StageError(
                        f"stage {name!r} failed: "
                        f"{type(exc).__name__}: {exc}") from exc
                missing = [rel for rel in artifacts
                           if not (out / rel).exists()]
                if missing:
                    raise StageError(
                        f"stage {name!r} did not produce: {missing}")
                duration = time.monotonic() - start
                marker = {
                    "stage": name,
                    "input_hash": expected,
                    "run_id": uuid.uuid4().hex,
                    "artifacts": sorted(artifacts),
                    "duration_s": duration,
                }
                _write_json(marker_path, marker)
                _update_artifact_manifest(out, name, marker["artifacts"])
                run._cache.clear()
                result.executed.append(name)
                result.stage_durations[name] = duration
                run.log(f"[{name}] done in {duration:.1f}s")
            else:
                run.log(f"[{name}] up to date")
            run_ids[name] = marker["run_id"]
            if name == until:
                break
    finally:
        lock.unlink(missing_ok=True)
    return result


def _update_artifact_manifest(out: Path, stage: str, artifacts):
    path = out / "artifacts.json"
    current = _load_marker(path) or {}
    current[stage] = {rel: _sha256_file(out / rel) for rel in artifacts}
    _write_json(path, current)
