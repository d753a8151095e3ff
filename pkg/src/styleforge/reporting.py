"""Markdown + SVG report over a finished pipeline run.

Renders the run's own metrics next to the shipped published-study
fixtures, with every derived column (gap closures, averages)
recomputed by the evaluation module.  Output bytes are deterministic
for fixed inputs.
"""

import json
import shutil
from pathlib import Path

import numpy as np

from . import benchmarks as bm
from . import evaluation as ev
from .corpus import STYLE_NEUTRAL
from .errors import ReportError


def _fmt(value, digits=2):
    if value is None:
        return "-"
    value = float(value)
    if np.isnan(value):
        return "-"
    return f"{value:.{digits}f}"


def _table(headers, rows):
    lines = ["| " + " | ".join(headers) + " |",
             "| " + " | ".join("---" for _ in headers) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines)


def multilingual_tables():
    """Speaker-similarity and style tables with recomputed Rel columns."""
    spk_rows = []
    sty_rows = []
    for r in bm.MULTILINGUAL_STUDY:
        spk = ev.relative_gap_closure(r.speaker.lower, r.speaker.upper,
                                      r.speaker.system)
        sty = ev.relative_gap_closure(r.style.lower, r.style.upper,
                                      r.style.system)
        spk_rows.append([r.locale, r.voice, _fmt(r.speaker.lower),
                         _fmt(r.speaker.upper), _fmt(r.speaker.system),
                         _fmt(spk)])
        sty_rows.append([r.locale, r.voice, _fmt(r.style.lower),
                         _fmt(r.style.upper), _fmt(r.style.system),
                         _fmt(sty)])
    spk = _table(["Locale", "Voice", "Source", "Target recs", "Augmented",
                  "Rel (%)"], spk_rows)
    sty = _table(["Locale", "Voice", "Neutral", "VC oracle", "Augmented",
                  "Rel (%)"], sty_rows)
    return spk, sty


def _ablation_table(study):
    rows = []
    for system in study["systems"]:
        rel = ev.relative_gap_closure(study["lower"], study["upper"], system)
        rows.append([_fmt(study["lower"]), _fmt(study["upper"]),
                     _fmt(system), _fmt(rel)])
    return _table(["Lower anchor", "Upper anchor", "System", "Rel (%)"],
                  rows)


def _run_sections(eval_data, synth_rows):
    parts = []
    vh = eval_data.get("vc_heldout", {})
    if vh.get("n"):
        parts.append("## Voice conversion, held-out\n")
        parts.append(_table(
            ["Metric", "Value"],
            [["conversions", vh["n"]],
             ["duration preserved",
              _fmt(100.0 * vh["duration_preserved_fraction"]) + " %"],
             ["target f0 mean", _fmt(vh["target_f0_mean_hz"]) + " Hz"],
             ["converted f0 mean", _fmt(vh["converted_f0_mean_hz"]) + " Hz"],
             ["f0 mean error", _fmt(vh["f0_mean_abs_error_hz"]) + " Hz"],
             ["log-f0 contour correlation", _fmt(vh["mean_log_f0_corr"], 3)],
             ["closer to target (identity)",
              _fmt(100.0 * vh["identity_fraction"]) + " %"],
             ["MCD vs source", _fmt(vh["mean_mcd_vs_source"]) + " dB"]]))
        parts.append("")

    styles = sorted({row["style"] for row in synth_rows})
    if styles:
        parts.append("## Synthesis\n")
        for style in styles:
            rows = [r for r in synth_rows if r["style"] == style]
            parts.append(f"### Style: {style}\n")
            parts.append(_table(
                ["Sentence", "Frames", "Stop step", "Ran away"],
                [[r["utterance_id"], r["n_frames"], r["stop_step"],
                  "yes" if r["ran_away"] else "no"] for r in rows]))
            parts.append("")
        if styles == [STYLE_NEUTRAL]:
            parts.append("Only the neutral style was synthesized; no "
                         "expressive styles in this run.\n")

    ts = eval_data.get("tts_style", {})
    if ts.get("n"):
        parts.append("## Style transfer proxy\n")
        parts.append(
            f"Conversational-centroid synthesis raised the re-estimated "
            f"log-f0 variance over neutral on "
            f"{_fmt(100.0 * ts['style_variance_fraction'], 1)} % of "
            f"{ts['n']} test sentences (style: "
            f"{ts['conversational_style']}).\n")

    lat = eval_data.get("latents", {})
    if lat.get("n"):
        parts.append("## Latent space\n")
        parts.append(
            f"k-means purity over {len(lat['labels'])} style labels on "
            f"{lat['n']} z-vectors: {_fmt(lat['purity'], 3)}.\n")
        parts.append("![latent projection](latents.svg)\n")
    return parts


def report(artifact_dir) -> Path:
    """Write report/report.md (+ latents.svg) for a finished run.

    Raises ReportError when the evaluation output is missing.
    """
    artifact_dir = Path(artifact_dir)
    eval_path = artifact_dir / "eval" / "evaluation.json"
    if not eval_path.exists():
        raise ReportError(f"no evaluation output at {eval_path}; "
                          f"run the pipeline first")
    try:
        eval_data = json.loads(eval_path.read_text())
    except ValueError as exc:
        raise ReportError(f"unreadable evaluation output: {exc}") from exc
    synth_path = artifact_dir / "synth" / "index.json"
    synth_rows = (json.loads(synth_path.read_text())
                  if synth_path.exists() else [])

    report_dir = artifact_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    parts = ["# Style transfer run report\n",
             f"Master seed: {eval_data.get('master_seed', '-')}\n"]
    parts += _run_sections(eval_data, synth_rows)

    parts.append("## Published-study regression fixtures\n")
    parts.append("Rel columns below are recomputed from the printed "
                 "means; see the benchmarks module for anchors.\n")
    spk, sty = multilingual_tables()
    parts.append("### Speaker similarity by voice\n")
    parts.append(spk)
    parts.append(f"\nMean Rel: "
                 f"{_fmt(ev.aggregate_gap_closures(bm.speaker_triples()))}"
                 f" %\n")
    parts.append("### Expressive style by voice\n")
    parts.append(sty)
    gains = [ev.reference_anchored_gain(r.style.lower, r.style.system)
             for r in bm.MULTILINGUAL_STUDY]
    parts.append(f"\nMean Rel: "
                 f"{_fmt(ev.aggregate_gap_closures(bm.style_triples()))} %; "
                 f"mean reference-anchored gain: "
                 f"{_fmt(float(np.mean(gains)), 1)} %\n")
    parts.append("### Supporting-speaker count ablation\n")
    parts.append(_ablation_table(bm.SUPPORTING_SPEAKERS_STUDY))
    parts.append(f"\nMean Rel: {_fmt(ev.aggregate_gap_closures(bm.closure_triples(bm.SUPPORTING_SPEAKERS_STUDY)), 1)} %\n")
    parts.append("### Supporting-data amount ablation\n")
    parts.append(_ablation_table(bm.DATA_AMOUNT_STUDY))
    parts.append(f"\nMean Rel: {_fmt(ev.aggregate_gap_closures(bm.closure_triples(bm.DATA_AMOUNT_STUDY)), 1)} %\n")

    svg_src = artifact_dir / "eval" / "latents.svg"
    if svg_src.exists():
        shutil.copyfile(svg_src, report_dir / "latents.svg")

    out_path = report_dir / "report.md"
    out_path.write_text("\n".join(parts))
    return report_dir
