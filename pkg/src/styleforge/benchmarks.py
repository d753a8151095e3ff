"""Reference listening-test results shipped as regression fixtures.

Mean scores from large-scale MUSHRA studies of this augmentation
recipe.  Only the printed means are stored; every derived column
(relative gap closures, averages, reference-anchored gains) is
recomputed by the evaluation module and checked against the printed
value in the test suite.

Anchor conventions:
  - speaker-similarity rows close the gap from the source-speaker
    anchor (lower) to the target-speaker recordings (upper);
  - expressive-style rows close the gap from the neutral system
    (lower) to the voice-converted oracle (upper);
  - reference-anchored style gains measure progress from the neutral
    system toward the 100-point hidden reference.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class ClosureRow:
    """Printed anchors and system mean plus the printed closure."""

    lower: float
    upper: float
    system: float
    printed_closure: float


@dataclass(frozen=True)
class LocaleVoiceResult:
    """One target voice: similarity and style closures side by side."""

    locale: str
    voice: str
    speaker: ClosureRow
    style: ClosureRow


# Ablation over the number of supporting speakers used for
# augmentation; one shared anchor pair, one system mean per variant.
SUPPORTING_SPEAKERS_STUDY = {
    "lower": 27.85,
    "upper": 71.93,
    "systems": (64.56, 65.03, 64.54),
    "printed_mean_closure": 83.6,
}

# Ablation over the amount of supporting-speaker data.
DATA_AMOUNT_STUDY = {
    "lower": 28.33,
    "upper": 72.32,
    "systems": (69.25, 69.84, 68.84, 69.51),
    "printed_mean_closure": 93.3,
}

# Per-voice results across seven locales.  speaker=(source anchor,
# target-recordings anchor, augmented system, printed closure);
# style=(voice-converted oracle, neutral system, augmented system,
# printed closure), stored as ClosureRow(lower=neutral, upper=oracle).
MULTILINGUAL_STUDY = (
    LocaleVoiceResult("pt-PT", "F1",
                      ClosureRow(24.65, 74.46, 59.17, 69.30),
                      ClosureRow(46.85, 68.89, 65.22, 83.35)),
    LocaleVoiceResult("pt-PT", "M1",
                      ClosureRow(15.52, 78.94, 74.10, 92.37),
                      ClosureRow(49.57, 65.75, 62.65, 80.84)),
    LocaleVoiceResult("pt-BR", "F1",
                      ClosureRow(26.17, 79.32, 67.81, 78.34),
                      ClosureRow(43.25, 69.58, 64.55, 80.90)),
    LocaleVoiceResult("pt-BR", "M1",
                      ClosureRow(19.55, 90.07, 77.25, 82.00),
                      ClosureRow(56.41, 70.12, 63.98, 55.22)),
    LocaleVoiceResult("es-ES", "F1",
                      ClosureRow(35.67, 76.53, 71.94, 88.77),
                      ClosureRow(53.20, 71.14, 65.89, 70.74)),
    LocaleVoiceResult("es-ES", "M1",
                      ClosureRow(21.91, 79.29, 76.39, 94.95),
                      ClosureRow(57.75, 73.41, 67.89, 64.75)),
    LocaleVoiceResult("es-MX", "F1",
                      ClosureRow(47.66, 65.67, 65.58, 99.50),
                      ClosureRow(59.61, 70.98, 67.91, 73.00)),
    LocaleVoiceResult("es-MX", "F2",
                      ClosureRow(49.77, 70.40, 70.85, 102.10),
                      ClosureRow(63.07, 68.95, 65.61, 43.20)),
    LocaleVoiceResult("de-DE", "F1",
                      ClosureRow(26.40, 77.30, 73.11, 91.77),
                      ClosureRow(56.64, 69.02, 62.12, 44.26)),
    LocaleVoiceResult("de-DE", "M1",
                      ClosureRow(27.48, 74.14, 72.33, 96.10),
                      ClosureRow(55.73, 64.68, 57.20, 16.42)),
    LocaleVoiceResult("it-IT", "F1",
                      ClosureRow(25.67, 69.42, 67.25, 95.00),
                      ClosureRow(48.38, 63.23, 55.36, 47.00)),
    LocaleVoiceResult("it-IT", "M1",
                      ClosureRow(17.70, 81.29, 80.39, 98.60),
                      ClosureRow(54.19, 71.22, 59.20, 29.42)),
    LocaleVoiceResult("fr-CA", "F1",
                      ClosureRow(36.87, 69.47, 68.12, 95.85),
                      ClosureRow(55.57, 65.87, 61.26, 55.24)),
    LocaleVoiceResult("fr-CA", "F2",
                      ClosureRow(38.10, 68.75, 67.31, 95.30),
                      ClosureRow(55.64, 64.22, 60.97, 62.12)),
)

# Printed summary statistics over the per-voice study.
MULTILINGUAL_SUMMARY = {
    "mean_speaker_closure": 91.42,
    "mean_style_closure": 57.6,
    "mean_style_reference_gain": 18.5,
}

# Per-voice printed closures known to disagree with their own printed
# means by more than rounding allows (recomputed values in parens):
# pt-BR/M1 speaker 82.00 (81.82), es-MX/F2 speaker 102.10 (102.18).
INCONSISTENT_SPEAKER_CELLS = (("pt-BR", "M1"), ("es-MX", "F2"))


def closure_triples(study):
    """(lower, upper, system) rows for an ablation study fixture."""
    return [(study["lower"], study["upper"], s) for s in study["systems"]]


def speaker_triples():
    return [(r.speaker.lower, r.speaker.upper, r.speaker.system)
            for r in MULTILINGUAL_STUDY]


def style_triples():
    return [(r.style.lower, r.style.upper, r.style.system)
            for r in MULTILINGUAL_STUDY]
