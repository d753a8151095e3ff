"""Experiment configuration: YAML in, validated dataclass out.

One flat config drives the whole pipeline.  Validation happens before
any compute; in particular the supporting-utterance budget must divide
equally across the supporting speakers.
"""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .corpus import KNOWN_STYLES, STYLE_CONVERSATIONAL, STYLE_NEUTRAL
from .errors import InvalidConfig


@dataclass
class ExperimentConfig:
    """All knobs for one end-to-end run.

    Corpus scale, per-stage step counts, and optimizer settings; every
    field has a default tuned for a desk-scale run.  `seed` is the
    master seed that fans out to per-stage seeds.
    """

    seed: int = 0
    out_dir: str = "runs/default"

    # corpus
    n_supporting: int = 2
    target_utterances: int = 40
    supporting_utterance_budget: int = 80
    styles: list = field(
        default_factory=lambda: [STYLE_NEUTRAL, STYLE_CONVERSATIONAL])
    source_speaker: str = "sup1"

    # alignment
    align_iterations: int = 5

    # speaker encoder
    spkemb_steps: int = 3000
    spkemb_batch_speakers: int = 3
    spkemb_batch_utterances: int = 4
    spkemb_lr: float = 1e-3

    # voice conversion
    vc_stage1_steps: int = 3200
    vc_stage2_steps: int = 800
    vc_batch_size: int = 8
    vc_stage1_lr: float = 1e-3
    vc_stage2_lr: float = 1e-4
    vc_beta: float = 1e-3

    # text to speech
    tts_steps: int = 2500
    tts_batch_size: int = 8
    tts_lr: float = 1e-3
    tts_beta: float = 1e-3

    # synthesis
    synthesis_seed_offset: int = 0
    gl_iterations: int = 60

    def __post_init__(self):
        self.styles = list(self.styles)
        self.validate()

    def validate(self):
        ints = ["n_supporting", "target_utterances",
                "supporting_utterance_budget", "align_iterations",
                "spkemb_batch_speakers", "spkemb_batch_utterances",
                "vc_batch_size", "tts_batch_size", "gl_iterations"]
        for name in ints:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidConfig(f"{name} must be a positive int, "
                                    f"got {value!r}")
        for name in ["spkemb_steps", "vc_stage1_steps", "vc_stage2_steps",
                     "tts_steps"]:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise InvalidConfig(f"{name} must be a non-negative int, "
                                    f"got {value!r}")
        for name in ["spkemb_lr", "vc_stage1_lr", "vc_stage2_lr",
                     "vc_beta", "tts_lr", "tts_beta"]:
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value <= 0:
                raise InvalidConfig(f"{name} must be positive, "
                                    f"got {value!r}")
        if self.supporting_utterance_budget % self.n_supporting != 0:
            raise InvalidConfig(
                f"supporting_utterance_budget "
                f"({self.supporting_utterance_budget}) must divide equally "
                f"across {self.n_supporting} supporting speakers")
        for style in self.styles:
            if style not in KNOWN_STYLES:
                raise InvalidConfig(f"unknown style {style!r}")
        valid_sources = {f"sup{i}" for i in range(1, self.n_supporting + 1)}
        if self.source_speaker not in valid_sources:
            raise InvalidConfig(
                f"source_speaker {self.source_speaker!r} is not one of "
                f"{sorted(valid_sources)}")

    @property
    def utterances_per_supporting(self) -> int:
        return self.supporting_utterance_budget // self.n_supporting

    @property
    def n_speakers(self) -> int:
        return 1 + self.n_supporting

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from a YAML file.

    Unknown keys are rejected so typos fail loudly.
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise InvalidConfig(f"config root must be a mapping, "
                            f"got {type(raw).__name__}")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InvalidConfig(f"unknown config keys: {unknown}")
    return ExperimentConfig(**raw)


def save_config(cfg: ExperimentConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
