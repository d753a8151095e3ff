import json

import yaml
from click.testing import CliRunner

from styleforge.cli import main
from styleforge.errors import ReportError


def write_config(tmp_path, **overrides):
    cfg = {
        "seed": 1,
        "out_dir": str(tmp_path / "run"),
        "n_supporting": 2,
        "target_utterances": 12,
        "supporting_utterance_budget": 24,
        "spkemb_steps": 2,
        "vc_stage1_steps": 2,
        "vc_stage2_steps": 1,
        "tts_steps": 2,
        "gl_iterations": 2,
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    return path


class TestStageCommands:
    def test_generate_runs_only_corpus(self, tmp_path):
        cfg_path = write_config(tmp_path)
        result = CliRunner().invoke(main, ["generate", "-c", str(cfg_path)])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "run" / "corpus" / "manifest.jsonl").exists()
        assert not (tmp_path / "run" / "markers" / "features.json").exists()

    def test_repeat_reports_up_to_date(self, tmp_path):
        cfg_path = write_config(tmp_path)
        runner = CliRunner()
        runner.invoke(main, ["generate", "-c", str(cfg_path)])
        result = runner.invoke(main, ["generate", "-c", str(cfg_path)])
        assert result.exit_code == 0
        assert "everything up to date" in result.output

    def test_out_option_overrides_config(self, tmp_path):
        cfg_path = write_config(tmp_path)
        other = tmp_path / "elsewhere"
        result = CliRunner().invoke(
            main, ["generate", "-c", str(cfg_path), "-o", str(other)])
        assert result.exit_code == 0, result.output
        assert (other / "corpus" / "manifest.jsonl").exists()

    def test_seed_option_recorded(self, tmp_path):
        cfg_path = write_config(tmp_path)
        result = CliRunner().invoke(
            main, ["generate", "-c", str(cfg_path), "--seed", "77"])
        assert result.exit_code == 0, result.output
        snapshot = (tmp_path / "run" / "config.yaml").read_text()
        assert "seed: 77" in snapshot

    def test_defaults_without_config_file(self, tmp_path):
        result = CliRunner().invoke(
            main, ["generate", "-o", str(tmp_path / "d")])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "d" / "corpus" / "manifest.jsonl").exists()

    def test_features_runs_through_generate(self, tmp_path):
        cfg_path = write_config(tmp_path)
        result = CliRunner().invoke(main, ["features", "-c", str(cfg_path)])
        assert result.exit_code == 0, result.output
        run = tmp_path / "run"
        assert (run / "markers" / "generate.json").exists()
        assert (run / "markers" / "features.json").exists()
        assert (run / "features" / "f0_means.json").exists()


class TestReportCommand:
    def test_report_without_run_fails(self, tmp_path):
        cfg_path = write_config(tmp_path)
        result = CliRunner().invoke(main, ["report", "-c", str(cfg_path)])
        assert result.exit_code != 0
        assert isinstance(result.exception, ReportError)

    def test_report_over_fake_eval(self, tmp_path):
        run = tmp_path / "run"
        (run / "eval").mkdir(parents=True)
        (run / "eval" / "evaluation.json").write_text(json.dumps({
            "master_seed": 0, "config": {},
            "vc_heldout": {"n": 0}, "tts_style": {"n": 0},
            "latents": {"n": 0},
        }))
        result = CliRunner().invoke(main, ["report", "-o", str(run)])
        assert result.exit_code == 0, result.output
        assert (run / "report" / "report.md").exists()


class TestHelp:
    def test_lists_all_subcommands(self):
        result = CliRunner().invoke(main, ["--help"])
        for name in ["generate", "features", "align", "train-spkemb",
                     "train-vc", "convert", "train-tts", "synthesize",
                     "evaluate", "report", "run-all"]:
            assert name in result.output
