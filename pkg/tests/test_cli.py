"""End-to-end command-line workflow on a toy corpus."""

import json
import os

import numpy as np
import pytest

from evcap import cli
from evcap.config import RunConfig, apply_env_overrides, parse_config_text, parse_offsets
from evcap.data import load_dataset, read_rows
from evcap.errors import ConfigError


TOY_CONFIG = """
# toy corpus: 20-vehicle fleet, short training
n_vehicles=20
snippets_per_vehicle=10
transfer_n_vehicles=10
pretrain_epochs=2
finetune_epochs=4
patience=3
batch_size=16
seeds=1
seed=1
"""


class TestConfig:
    def test_defaults_match_reference_values(self):
        config = RunConfig()
        assert config.mask_ratio == 0.5
        assert config.temperature == 0.1
        assert config.d_f == 32
        assert config.d_h == 128
        assert config.batch_size == 32
        assert config.peak_lr == 0.01
        assert config.pretrain_epochs == 50
        assert config.finetune_epochs == 200

    def test_parse_and_hash(self):
        a = parse_config_text(TOY_CONFIG)
        b = parse_config_text(TOY_CONFIG)
        assert a == b and a.config_hash() == b.config_hash()
        assert a.config_hash() != RunConfig().config_hash()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("bogus_key=1")

    def test_env_override(self):
        config = apply_env_overrides(RunConfig(), environ={"EVCAP_BATCH_SIZE": "16"})
        assert config.batch_size == 16

    def test_offsets_parse(self):
        out = parse_offsets("current_a:1.05:0.4,soc_pct:1.0:-2")
        assert out["current_a"] == (1.05, 0.4)
        assert out["soc_pct"] == (1.0, -2.0)
        with pytest.raises(ConfigError):
            parse_offsets("bad")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    (out / "toy.config").write_text(TOY_CONFIG)
    return out


def run(workdir, command, *extra):
    return cli.main(
        [command, "--config", str(workdir / "toy.config"), "--out", str(workdir), *extra]
    )


class TestWorkflow:
    def test_full_pipeline(self, workdir):
        import time

        tic = time.perf_counter()
        assert run(workdir, "gen") == 0
        fleet = load_dataset(workdir / "fleet.csv")
        assert len(fleet) == 200
        assert (workdir / "fleet.csv.meta.json").exists()
        assert (workdir / "transfer_fleet.csv").exists()
        assert (workdir / "novel.csv").exists()

        assert run(workdir, "split") == 0
        header, rows = read_rows(workdir / "manifest.csv")
        assert len(rows) == 20

        assert run(workdir, "pretrain") == 0
        assert (workdir / "pretrained.ckpt").exists()
        log_lines = (workdir / "pretrain_log.jsonl").read_text().splitlines()
        assert "run" in json.loads(log_lines[0])
        assert json.loads(log_lines[1])["epoch"] == 0

        assert run(workdir, "finetune") == 0
        assert (workdir / "finetuned.ckpt").exists()

        assert run(workdir, "eval", "--set", "protocol=age_shift") == 0
        header, rows = read_rows(workdir / "report_age_shift.csv")
        assert len(rows) == 3
        assert (workdir / "report_age_shift.svg").exists()

        assert run(workdir, "dump-sim") == 0
        header, rows = read_rows(workdir / "similarity.csv")
        assert header[0] == "anchor_snippet_id"
        assert time.perf_counter() - tic < 600  # toy pipeline fits a laptop budget

    def test_pretrain_rerun_is_bitwise_identical(self, workdir):
        first = (workdir / "pretrained.ckpt").read_bytes()
        assert run(workdir, "pretrain") == 0
        assert (workdir / "pretrained.ckpt").read_bytes() == first

    def test_missing_artifact_exit_code(self, tmp_path):
        (tmp_path / "toy.config").write_text(TOY_CONFIG)
        for command in ("finetune", "eval", "dump-sim"):
            code = cli.main(
                [command, "--config", str(tmp_path / "toy.config"), "--out", str(tmp_path)]
            )
            assert code == cli.EXIT_MISSING

    def test_bad_config_exit_code(self, tmp_path):
        (tmp_path / "bad.config").write_text("bogus=1")
        code = cli.main(["gen", "--config", str(tmp_path / "bad.config"), "--out", str(tmp_path)])
        assert code == cli.EXIT_CONFIG

    def test_schema_error_exit_code(self, workdir, tmp_path):
        bad = tmp_path / "fleet.csv"
        bad.write_text("not,a,valid,header\n")
        code = cli.main(
            [
                "split",
                "--config", str(workdir / "toy.config"),
                "--out", str(tmp_path),
                "--set", f"data_path={bad}",
            ]
        )
        assert code == cli.EXIT_SCHEMA

    def test_checkpoint_mismatch_exit_code(self, workdir):
        code = run(workdir, "finetune", "--set", "d_h=64")
        assert code == cli.EXIT_CHECKPOINT
