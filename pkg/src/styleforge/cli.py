"""Command-line entry points for the pipeline.

Each stage command runs the pipeline up to and including that stage,
reusing completed work via the stage markers, so any command is safe
to repeat.  `run-all` executes everything; `report` renders Markdown
over a finished run.
"""

import click

from .config import ExperimentConfig, load_config
from .pipeline import run_pipeline
from .reporting import report as build_report


def _load(config_path, out, seed) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    if out is not None:
        cfg.out_dir = out
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def _stage_command(name, stage, help_text):
    @main.command(name=name, help=help_text)
    @click.option("--config", "-c", "config_path",
                  type=click.Path(exists=True, dir_okay=False),
                  default=None, help="YAML experiment config.")
    @click.option("--out", "-o", default=None,
                  help="Output directory (overrides the config).")
    @click.option("--seed", type=int, default=None,
                  help="Master seed (overrides the config; the "
                       "STYLEFORGE_SEED env var overrides both).")
    def _cmd(config_path, out, seed, _stage=stage):
        cfg = _load(config_path, out, seed)
        result = run_pipeline(cfg, until=_stage, log=click.echo)
        if not result.executed:
            click.echo("everything up to date")
    return _cmd


@click.group()
def main():
    """Cross-speaker style transfer at desk scale."""


_stage_command("generate", "generate",
               "Render the synthetic corpus and its manifest.")
_stage_command("features", "features",
               "Extract mel, MFCC, and f0 features for every utterance.")
_stage_command("align", "align",
               "Train the monophone aligner and force-align all data.")
_stage_command("train-spkemb", "spkemb",
               "Train the speaker encoder and compute speaker centroids.")
_stage_command("train-vc", "vc",
               "Train the voice-conversion model.")
_stage_command("convert", "convert",
               "Convert supporting-speaker data to the target voice.")
_stage_command("train-tts", "tts",
               "Pool natural and converted data and train the "
               "synthesizer.")
_stage_command("synthesize", "synthesize",
               "Compute style centroids and synthesize the test "
               "sentences.")
_stage_command("evaluate", "evaluate",
               "Run the objective evaluation over the finished run.")
_stage_command("run-all", None,
               "Run the whole pipeline end to end.")


@main.command(help="Render the Markdown report for a finished run.")
@click.option("--config", "-c", "config_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML experiment config (used for the run directory).")
@click.option("--out", "-o", default=None,
              help="Run directory (overrides the config).")
def report(config_path, out):
    cfg = _load(config_path, out, None)
    report_dir = build_report(cfg.out_dir)
    click.echo(f"report written to {report_dir / 'report.md'}")


if __name__ == "__main__":
    main()
