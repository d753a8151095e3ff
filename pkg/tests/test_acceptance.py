"""Acceptance suite: one pass/fail line per criterion.

Criteria 4-7 share one full default-config pipeline run (session
fixture; set STYLEFORGE_ACCEPTANCE_RUN to a finished run directory to
reuse it across invocations).  The two published speaker-similarity
cells that are internally inconsistent with their own printed anchors
get an honest separate test that is expected to stay red; see the
repository notes for the recomputed values.
"""

import itertools
import json
import os
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from styleforge import align, benchmarks as bm, corpus, dsp
from styleforge import evaluation as ev
from styleforge import spkemb, tts, vc
from styleforge.config import ExperimentConfig
from styleforge.errors import (
    AlignmentInfeasible,
    DegenerateGap,
    InvalidBatch,
    MalformedScreen,
    ManifestError,
    UndefinedSpeakerMean,
)
from styleforge.pipeline import STAGE_NAMES, run_pipeline


def verdict(number, description, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"\n[{tag}] criterion {number}: {description}{suffix}")
    assert ok, f"criterion {number}: {description}{suffix}"


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    reuse = os.environ.get("STYLEFORGE_ACCEPTANCE_RUN")
    if reuse:
        out = Path(reuse)
    else:
        out = tmp_path_factory.mktemp("acceptance") / "run"
    cfg = ExperimentConfig(seed=0, out_dir=str(out))
    run_pipeline(cfg)
    durations = {}
    for name in STAGE_NAMES:
        marker = json.loads((out / "markers" / f"{name}.json").read_text())
        durations[name] = marker["duration_s"]
    data = json.loads((out / "eval" / "evaluation.json").read_text())
    return SimpleNamespace(cfg=cfg, out=out, data=data,
                           durations=durations)


# -- criterion 1: published-statistics reproduction ------------------

class TestCriterion1:
    def test_reproduces_published_statistics(self):
        t0 = time.monotonic()
        problems = []

        def check(label, got, want, tol):
            if abs(got - want) > tol:
                problems.append(f"{label}: {got:.4f} vs {want} (±{tol})")

        known_off = set(bm.INCONSISTENT_SPEAKER_CELLS)
        for row in bm.MULTILINGUAL_STUDY:
            sty = ev.relative_gap_closure(row.style.lower, row.style.upper,
                                          row.style.system)
            check(f"{row.locale}/{row.voice} style", sty,
                  row.style.printed_closure, 0.05)
            if (row.locale, row.voice) in known_off:
                continue
            spk = ev.relative_gap_closure(
                row.speaker.lower, row.speaker.upper, row.speaker.system)
            check(f"{row.locale}/{row.voice} speaker", spk,
                  row.speaker.printed_closure, 0.05)

        check("mean speaker closure",
              ev.aggregate_gap_closures(bm.speaker_triples()), 91.42, 0.05)
        check("mean style closure",
              ev.aggregate_gap_closures(bm.style_triples()), 57.6, 0.05)
        gains = [ev.reference_anchored_gain(r.style.lower, r.style.system)
                 for r in bm.MULTILINGUAL_STUDY]
        check("mean reference-anchored gain", float(np.mean(gains)),
              18.5, 0.1)
        check("supporting-speaker study closure",
              ev.aggregate_gap_closures(
                  bm.closure_triples(bm.SUPPORTING_SPEAKERS_STUDY)),
              83.6, 0.1)
        check("data-amount study closure",
              ev.aggregate_gap_closures(
                  bm.closure_triples(bm.DATA_AMOUNT_STUDY)),
              93.3, 0.1)
        elapsed = time.monotonic() - t0
        if elapsed >= 1.0:
            problems.append(f"took {elapsed:.2f}s, budget 1s")
        verdict(1, "published statistics reproduce", not problems,
                "; ".join(problems) or f"26 cells + 5 aggregates, "
                f"{elapsed * 1000:.0f}ms")

    def test_known_inconsistent_cells_stay_red(self):
        # two printed cells disagree with their own printed anchors; a
        # faithful recomputation cannot land within 0.05 pp of them
        problems = []
        for row in bm.MULTILINGUAL_STUDY:
            if (row.locale, row.voice) not in set(
                    bm.INCONSISTENT_SPEAKER_CELLS):
                continue
            got = ev.relative_gap_closure(
                row.speaker.lower, row.speaker.upper, row.speaker.system)
            if abs(got - row.speaker.printed_closure) > 0.05:
                problems.append(
                    f"{row.locale}/{row.voice}: recomputed {got:.4f} vs "
                    f"printed {row.speaker.printed_closure}")
        verdict(1, "internally inconsistent printed cells reproduce",
                not problems, "; ".join(problems))


# -- criterion 2: gradient suite -------------------------------------

def _central_diff(fn, tensors, which, idx, eps):
    t = tensors[which]
    orig = t[idx].item()
    t.data[idx] = orig + eps
    hi = float(fn(*tensors))
    t.data[idx] = orig - eps
    lo = float(fn(*tensors))
    t.data[idx] = orig
    return (hi - lo) / (2 * eps)


def _check_gradients(fn, tensors, problems, label, n_coords=6, eps=1e-5):
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = fn(*tensors)
    loss.backward()
    rng = np.random.default_rng(0)
    for k, t in enumerate(tensors):
        flat = t.detach().reshape(-1)
        coords = rng.choice(flat.numel(),
                            size=min(n_coords, flat.numel()),
                            replace=False)
        for c in coords:
            idx = np.unravel_index(int(c), t.shape)
            with torch.no_grad():
                num = _central_diff(fn, tensors, k, idx, eps)
            ana = float(t.grad[idx])
            # near-zero gradients (the softmax bias is exactly zero) are
            # compared absolutely; the floor keeps FD noise out of the ratio
            denom = max(abs(num), abs(ana), 1e-2)
            rel = abs(num - ana) / denom
            if rel > 1e-4:
                problems.append(f"{label} tensor{k}{idx}: rel err {rel:.2e}")


class TestCriterion2:
    def test_losses_match_finite_differences(self):
        t0 = time.monotonic()
        problems = []
        dd = dict(dtype=torch.float64)

        g = torch.Generator().manual_seed(0)
        emb = torch.randn(3, 3, 5, generator=g, **dd)
        w = torch.tensor(8.0, **dd)
        b = torch.tensor(-4.0, **dd)
        _check_gradients(
            lambda e, ww, bb: spkemb.ge2e_loss(e, ww, bb),
            [emb, w, b], problems, "ge2e")

        pred = torch.randn(7, 4, generator=g, **dd)
        target = torch.randn(7, 4, generator=g, **dd)
        mu = torch.randn(2, 3, generator=g, **dd)
        ls = torch.randn(2, 3, generator=g, **dd) * 0.3
        _check_gradients(
            lambda p, m, s: vc.vc_loss(
                p, target, vc.VcLatent(z=m, mu=m, log_sigma=s),
                beta=0.05).total,
            [pred, mu, ls], problems, "vc")

        pred_t = torch.randn(6, 4, generator=g, **dd)
        target_t = torch.randn(6, 4, generator=g, **dd)
        logits = torch.randn(6, generator=g, **dd)
        stops = (torch.rand(6, generator=g) > 0.7).to(torch.float64)
        mu_t = torch.randn(2, generator=g, **dd)
        ls_t = torch.randn(2, generator=g, **dd) * 0.3
        _check_gradients(
            lambda p, lg, m, s: tts.tts_loss(
                p, target_t, lg, stops, m, s, beta=0.05).total,
            [pred_t, logits, mu_t, ls_t], problems, "tts")

        elapsed = time.monotonic() - t0
        if elapsed >= 60:
            problems.append(f"took {elapsed:.1f}s, budget 60s")
        verdict(2, "loss gradients match central differences",
                not problems, "; ".join(problems) or f"{elapsed:.1f}s")


# -- criterion 3: alignment oracle -----------------------------------

def _brute_force_best(model, chain_ids, emissions):
    n_frames, n_states = emissions.shape[0], chain_ids.size
    stay = np.log(model.self_loops[chain_ids])
    advance = np.log(1.0 - model.self_loops[chain_ids])
    best, best_paths = -np.inf, []
    for cuts in itertools.combinations(range(1, n_frames), n_states - 1):
        bounds = (0,) + cuts + (n_frames,)
        ll = 0.0
        for s in range(n_states):
            lo, hi = bounds[s], bounds[s + 1]
            ll += emissions[lo:hi, s].sum()
            ll += stay[s] * (hi - lo - 1)
            if s < n_states - 1:
                ll += advance[s]
        if ll > best + 1e-12:
            best, best_paths = ll, [bounds]
        elif abs(ll - best) <= 1e-12:
            best_paths.append(bounds)
    return best, best_paths


class TestCriterion3:
    def test_force_align_matches_enumeration(self, tmp_path):
        t0 = time.monotonic()
        problems = []
        rng = np.random.default_rng(0)
        phones = ["aa", "iy", "s"]
        for trial in range(200):
            n_phones = int(rng.integers(1, 4))
            chain = [phones[i] for i in
                     rng.integers(0, len(phones), size=n_phones)]
            n_states = n_phones * align.STATES_PER_PHONE
            n_frames = int(rng.integers(n_states, 11))
            dim = 2
            model = align.MonophoneHmm(
                phones=phones,
                means=rng.normal(size=(9, dim)),
                variances=rng.uniform(0.2, 1.5, size=(9, dim)),
                self_loops=rng.uniform(0.05, 0.95, size=9),
            )
            frames = rng.normal(size=(n_frames, dim))
            seq = align.force_align(model, chain, frames)
            chain_ids = align._chain_state_ids(model, chain)
            emissions = align._emission_log_probs(model, frames, chain_ids)
            best, best_paths = _brute_force_best(model, chain_ids,
                                                 emissions)
            if abs(seq.log_prob - best) > 1e-9:
                problems.append(f"trial {trial}: log prob "
                                f"{seq.log_prob:.6f} vs {best:.6f}")
                continue
            got_bounds = tuple(
                int(np.searchsorted(seq.chain_positions, s))
                for s in range(1, chain_ids.size))
            decoded = (0,) + got_bounds + (n_frames,)
            if decoded not in [tuple(p) for p in best_paths]:
                problems.append(f"trial {trial}: path not optimal")

        man = corpus.generate_synthetic_corpus(
            tmp_path / "corpus", seed=5, n_speakers=2,
            utterances_per_speaker=10)
        mfccs = {}
        for utt in man.utterances:
            clip = dsp.AudioClip(corpus.read_wav(man.audio_file(utt)),
                                 utterance_id=utt.utterance_id)
            mfccs[utt.utterance_id] = dsp.mfcc(clip).frames
        model = align.flat_start_init(man, mfccs)
        model = align.viterbi_train(model, man, mfccs, n_iters=5)
        tol = 1e-6 * abs(model.history[0])
        for a, b in zip(model.history, model.history[1:]):
            if b < a - tol:
                problems.append(f"log likelihood dropped: {a:.3f} -> "
                                f"{b:.3f}")
        elapsed = time.monotonic() - t0
        if elapsed >= 120:
            problems.append(f"took {elapsed:.1f}s, budget 120s")
        verdict(3, "alignment equals exhaustive enumeration",
                not problems,
                "; ".join(problems) or f"200 instances, {elapsed:.1f}s")


# -- criteria 4-7: full pipeline -------------------------------------

class TestCriterion4:
    def test_vc_structural_invariants(self, pipeline_run):
        vh = pipeline_run.data["vc_heldout"]
        cfg = pipeline_run.cfg
        problems = []
        if vh["duration_preserved_fraction"] != 1.0:
            problems.append(
                f"duration preserved on only "
                f"{100 * vh['duration_preserved_fraction']:.0f}%")
        if vh["f0_mean_abs_error_hz"] > 15.0:
            problems.append(f"f0 mean error "
                            f"{vh['f0_mean_abs_error_hz']:.1f} Hz > 15")
        if vh["mean_log_f0_corr"] < 0.7:
            problems.append(f"contour correlation "
                            f"{vh['mean_log_f0_corr']:.3f} < 0.7")
        steps = cfg.vc_stage1_steps + cfg.vc_stage2_steps
        if steps > 5000:
            problems.append(f"{steps} training steps > 5000")
        vc_minutes = pipeline_run.durations["vc"] / 60
        if vc_minutes > 30:
            problems.append(f"VC training took {vc_minutes:.1f} min > 30")
        verdict(4, "VC duration/f0/contour invariants", not problems,
                "; ".join(problems) or
                f"n={vh['n']}, f0 err {vh['f0_mean_abs_error_hz']:.1f} Hz, "
                f"corr {vh['mean_log_f0_corr']:.2f}, "
                f"{steps} steps in {vc_minutes:.1f} min")


class TestCriterion5:
    def test_identity_and_style_proxies(self, pipeline_run):
        vh = pipeline_run.data["vc_heldout"]
        ts = pipeline_run.data["tts_style"]
        problems = []
        if vh["identity_fraction"] < 0.8:
            problems.append(f"identity fraction "
                            f"{vh['identity_fraction']:.2f} < 0.8")
        if ts["style_variance_fraction"] < 0.8:
            problems.append(f"style variance fraction "
                            f"{ts['style_variance_fraction']:.2f} < 0.8")
        verdict(5, "identity and style proxies clear 80%", not problems,
                "; ".join(problems) or
                f"identity {100 * vh['identity_fraction']:.0f}% of "
                f"{vh['n']}, style "
                f"{100 * ts['style_variance_fraction']:.0f}% of "
                f"{ts['n']}")


class TestCriterion6:
    def test_latent_separation(self, pipeline_run):
        lat = pipeline_run.data["latents"]
        svg = pipeline_run.out / "eval" / "latents.svg"
        problems = []
        if len(lat["labels"]) != 3:
            problems.append(f"expected neutral + 2 supporting styles, "
                            f"got {lat['labels']}")
        if lat["purity"] < 0.8:
            problems.append(f"purity {lat['purity']:.3f} < 0.8")
        if not svg.exists() or svg.stat().st_size == 0:
            problems.append("projection plot missing")
        verdict(6, "latent style separation", not problems,
                "; ".join(problems) or
                f"purity {lat['purity']:.3f} over {lat['n']} vectors, "
                f"plot at {svg.name}")


class TestCriterion7:
    def test_determinism_and_runtime(self, pipeline_run, tmp_path_factory):
        problems = []
        base = tmp_path_factory.mktemp("determinism")

        def reduced(out):
            return ExperimentConfig(
                seed=3, out_dir=str(out),
                n_supporting=2, target_utterances=12,
                supporting_utterance_budget=24,
                spkemb_steps=10, vc_stage1_steps=10, vc_stage2_steps=5,
                tts_steps=10, gl_iterations=5)

        run_pipeline(reduced(base / "a"))
        run_pipeline(reduced(base / "b"))
        blob_a = (base / "a" / "eval" / "evaluation.json").read_bytes()
        blob_b = (base / "b" / "eval" / "evaluation.json").read_bytes()
        if blob_a != blob_b:
            problems.append("evaluation JSON differs between two "
                            "fixed-seed runs")
        total_min = sum(pipeline_run.durations.values()) / 60
        if total_min > 60:
            problems.append(f"pipeline took {total_min:.1f} min > 60")
        verdict(7, "byte-identical reruns within the time budget",
                not problems,
                "; ".join(problems) or
                f"{len(blob_a)} identical bytes; full run "
                f"{total_min:.1f} min single-core")


# -- criterion 8: degenerate inputs ----------------------------------

class TestCriterion8:
    def test_documented_errors_fire_on_their_triggers(self, pipeline_run):
        problems = []

        def expect(exc_type, fn):
            try:
                fn()
            except exc_type:
                return
            except Exception as other:
                problems.append(f"{exc_type.__name__}: got "
                                f"{type(other).__name__} instead")
            else:
                problems.append(f"{exc_type.__name__}: not raised")

        expect(UndefinedSpeakerMean, lambda: dsp.speaker_log_f0_mean(
            [dsp.F0Track(log_f0=np.full(5, np.log(150.0)),
                         voiced=np.zeros(5, dtype=bool))]))
        expect(AlignmentInfeasible, lambda: align.force_align(
            align.MonophoneHmm(
                phones=["aa"], means=np.zeros((3, 2)),
                variances=np.ones((3, 2)),
                self_loops=np.full(3, 0.5)),
            ["aa"], np.zeros((2, 2))))
        expect(InvalidBatch, lambda: spkemb.ge2e_loss(
            torch.zeros(1, 3, 4), torch.tensor(10.0),
            torch.tensor(-5.0)))
        expect(DegenerateGap,
               lambda: ev.relative_gap_closure(50.0, 50.0, 60.0))
        expect(MalformedScreen, lambda: ev.confusion_from_ratings({
            "ref": [ev.RatingScreen("s1", "l1", {"p": 50.0, "q": 40.0}),
                    ev.RatingScreen("s2", "l2", {"p": 30.0})]}))

        def bad_manifest():
            man = corpus.Manifest(utterances=[], speakers={
                "sup1": {"role": "supporting", "gender": "f"}})
            return man.target_speaker

        expect(ManifestError, bad_manifest)

        # happy path witness: the full pipeline raised none of them
        happy = pipeline_run.data["vc_heldout"]["n"] > 0
        if not happy:
            problems.append("pipeline happy path incomplete")
        verdict(8, "documented errors fire exactly on their triggers",
                not problems, "; ".join(problems) or "6 triggers + "
                "happy-path witness")
