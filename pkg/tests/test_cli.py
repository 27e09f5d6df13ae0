import json
from pathlib import Path

import pytest

from conftest import small_overrides
from pq_multilabel.__main__ import cli
from pq_multilabel.data_io import read_csv


def flags(overrides, **extra):
    overrides = {**overrides, **extra}
    args = []
    for path, value in overrides.items():
        args += [f"--{path}", value if isinstance(value, str) else json.dumps(value)]
    return args


@pytest.fixture
def run_flags(tmp_path):
    def make(**extra):
        return flags(
            small_overrides(tmp_path / "run"),
            heads=["vanilla"],
            conditions=["clean", "pq_multi"],
            seeds=[0],
            **extra,
        )

    return make


class TestStages:
    def test_score_then_pool_matches_fused_pool(self, run_flags, tmp_path):
        scores = tmp_path / "scores.csv"
        assert cli(["score", "--output", str(scores), *run_flags()]) == 0
        assert cli(["pool", "--scores", str(scores), *run_flags()]) == 0
        pairs_csv = Path("conditions") / "pq_multi" / "pairs.csv"
        staged = (tmp_path / "run" / pairs_csv).read_bytes()

        fused_flags = run_flags()
        fused_flags[fused_flags.index("--output_dir") + 1] = str(tmp_path / "fused")
        assert cli(["pool", *fused_flags]) == 0
        fused = (tmp_path / "fused" / pairs_csv).read_bytes()
        assert staged == fused

    def test_cluster(self, run_flags, tmp_path):
        assert cli(["cluster", "--output", str(tmp_path / "k.csv"), *run_flags()]) == 0
        meta, rows = read_csv(tmp_path / "k.csv")
        assert len(rows) == 10
        assert meta["seeds"] == "0"

    def test_train_then_eval(self, run_flags, tmp_path, capsys):
        assert cli(["train", "--condition", "clean", *run_flags()]) == 0
        checkpoint = tmp_path / "run" / "conditions" / "clean" / "vanilla_seed0.ckpt"
        assert checkpoint.is_file()
        output = tmp_path / "eval.csv"
        args = ["eval", "--checkpoint", str(checkpoint), "--head", "mc_dropout"]
        assert cli([*args, "--output", str(output), *run_flags()]) == 0
        assert "rotation: entropy" in capsys.readouterr().out
        meta, rows = read_csv(output)
        assert meta["checkpoint"] == str(checkpoint)
        assert len(rows) == 2 + 10

    def test_reproduce_and_plot(self, run_flags, tmp_path, capsys):
        assert cli(["--log-level", "INFO", "reproduce", *run_flags()]) == 0
        out = capsys.readouterr().out
        assert "criterion 11" in out
        assert (tmp_path / "run" / "report.md").is_file()

        png = tmp_path / "curves.png"
        args = ["plot", "--output", str(png), "--metric", "accuracy"]
        assert cli([*args, *run_flags()]) == 0
        assert png.read_bytes().startswith(b"\x89PNG")

    def test_config_file_and_seed_flag(self, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text(
            "\n".join(
                [
                    'heads = ["vanilla"]',
                    'conditions = ["clean"]',
                    'suites = ["rotation"]',
                    "seeds = [4, 5]",
                    f'output_dir = "{(tmp_path / "cfg_run").as_posix()}"',
                    "[data.synthetic]",
                    "n_train = 100",
                    "n_test = 20",
                    "[hyper]",
                    "epochs = 1",
                    "[shifts]",
                    "angles = [30]",
                    "[acceptance]",
                    "retry = false",
                ]
            ),
            encoding="utf-8",
        )
        assert cli(["reproduce", "--config", str(config), "--seed", "7"]) == 0
        meta, _ = read_csv(tmp_path / "cfg_run" / "report.csv")
        assert meta["seeds"] == "7"


class TestErrors:
    def test_missing_label_source_exits_one(self, tmp_path, capsys):
        args = flags(
            small_overrides(tmp_path / "run"),
            conditions=["noisy_single"],
            **{"labels.simulate_annotators": 0},
        )
        assert cli(["reproduce", *args]) == 1
        assert "noisy_single" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert cli(["reproduce", "--pool.size", "3"]) == 1
        assert "--pool.size" in capsys.readouterr().err

    def test_invalid_value(self, tmp_path, capsys):
        args = flags(small_overrides(tmp_path / "run"), **{"pool.pool_frac": 1.5})
        assert cli(["pool", *args]) == 1
        assert "pool_frac" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli(["score", "--config", str(tmp_path / "nope.toml")]) == 1
        assert "config file not found" in capsys.readouterr().err

    def test_unknown_command(self):
        assert cli(["distill"]) == 1
