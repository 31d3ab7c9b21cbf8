"""Configuration handling and CLI pipeline tests."""

import os

import pytest
import yaml

from occugrasp.cli import main
from occugrasp.config import (PipelineConfig, apply_override, config_from_dict,
                              dump_config, load_config)
from occugrasp.errors import ConfigError

SMALL_SCENE = {
    "scene": {"shape": {"type": "sphere", "radius": 0.12},
              "frame_count": 6, "image_size": 32, "focal": 30.0},
    "camera": {"stride": 2},
    "svgp": {"inducing": 32, "lr": 0.05, "epochs": 15},
    "grasp": {"gripper_width_max": 0.26, "max_pairs": 200},
}


def write_config(tmp_path, extra=None, name="config.yaml"):
    tmp_path.mkdir(parents=True, exist_ok=True)
    doc = dict(SMALL_SCENE)
    doc["paths"] = {"input_dir": str(tmp_path / "dataset"),
                    "output_dir": str(tmp_path / "out"),
                    "checkpoint_dir": str(tmp_path / "ckpt")}
    if extra:
        for key, val in extra.items():
            doc.setdefault(key, {}).update(val)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


class TestConfig:
    def test_defaults_reproduce_reference_constants(self):
        doc = PipelineConfig().to_dict()
        assert doc["camera"]["depth_variance"] == 0.001
        assert doc["camera"]["stride"] == 4
        assert doc["svgp"]["inducing"] == 500
        assert doc["svgp"]["lr"] == 1e-3
        assert doc["svgp"]["epochs"] == 100
        assert doc["grasp"]["nu"] == 5
        assert doc["field"]["outlier_std_ratio"] == 0.01

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"bogus": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"camera": {"stride": 2, "typo": 1}})

    def test_file_overrides_default(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("camera: {stride: 2}\n")
        cfg = load_config(path)
        assert cfg.camera.stride == 2
        assert cfg.svgp.inducing == 500

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("camera: {stride: 2}\n")
        cfg = load_config(path)
        apply_override(cfg, "camera.stride=8")
        assert cfg.camera.stride == 8

    def test_seed_override(self):
        cfg = PipelineConfig()
        apply_override(cfg, "seed=17")
        assert cfg.seed == 17

    def test_bad_override_rejected(self):
        cfg = PipelineConfig()
        with pytest.raises(ConfigError):
            apply_override(cfg, "camera.typo=1")
        with pytest.raises(ConfigError):
            apply_override(cfg, "no-equals-sign")

    def test_dump_round_trip(self):
        cfg = PipelineConfig()
        clone = config_from_dict(yaml.safe_load(dump_config(cfg)))
        assert dump_config(clone) == dump_config(cfg)


class TestCli:
    def test_dump_config_exits_zero(self, capsys):
        assert main(["dump-config"]) == 0
        out = capsys.readouterr().out
        assert "stride: 4" in out

    def test_usage_error_exit_code(self, tmp_path):
        missing = tmp_path / "nope.yaml"
        assert main(["--config", str(missing), "dump-config"]) == 1

    def test_bad_override_exit_code(self):
        assert main(["--set", "camera.typo=1", "dump-config"]) == 1

    def test_run_produces_report_with_all_stages(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["--config", str(cfg), "run"]) == 0
        report = yaml.safe_load((tmp_path / "out" / "report.yaml").read_text())
        assert [s["stage"] for s in report["stages"]] == \
            ["generate", "backproject", "filter", "field", "train", "fuse", "rank"]
        assert (tmp_path / "out" / "grasps_ranked.csv").exists()

    def test_rerun_skips_completed_stages(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["--config", str(cfg), "run"]) == 0
        assert main(["--config", str(cfg), "run"]) == 0
        report = yaml.safe_load((tmp_path / "out" / "report.yaml").read_text())
        assert all(s["skipped"] for s in report["stages"])

    def test_corrupt_checkpoint_restarts_stage(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["--config", str(cfg), "run"]) == 0
        (tmp_path / "ckpt" / "field.bin").write_bytes(b"garbage")
        assert main(["--config", str(cfg), "run"]) == 0
        report = yaml.safe_load((tmp_path / "out" / "report.yaml").read_text())
        stages = {s["stage"]: s["skipped"] for s in report["stages"]}
        assert stages["field"] is False
        assert stages["backproject"] is True

    def test_config_change_invalidates_downstream(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["--config", str(cfg), "run"]) == 0
        assert main(["--config", str(cfg), "--set", "grasp.nu=3", "run"]) == 0
        report = yaml.safe_load((tmp_path / "out" / "report.yaml").read_text())
        stages = {s["stage"]: s["skipped"] for s in report["stages"]}
        assert stages["rank"] is False

    def test_individual_subcommands_chain(self, tmp_path):
        cfg = write_config(tmp_path)
        for cmd in ("generate", "reconstruct", "field", "train", "fuse", "rank"):
            assert main(["--config", str(cfg), cmd]) == 0, cmd
        assert (tmp_path / "out" / "grasps_ranked.csv").exists()

    def test_fuse_with_user_grid(self, tmp_path):
        cfg = write_config(tmp_path)
        for cmd in ("generate", "reconstruct", "field", "train"):
            assert main(["--config", str(cfg), cmd]) == 0
        queries = tmp_path / "queries.csv"
        queries.write_text("0.0,0.0,0.0\n0.05,0.0,0.0\n")
        assert main(["--config", str(cfg), "fuse", "--queries", str(queries)]) == 0
        occ = (tmp_path / "out" / "occupancy.csv").read_text().strip().splitlines()
        assert len(occ) == 3  # header + 2 queries

    def test_stage_failure_exit_code(self, tmp_path):
        cfg = write_config(tmp_path)
        # rank without upstream outputs must fail as a stage error
        assert main(["--config", str(cfg), "rank"]) == 2

    def test_end_to_end_determinism(self, tmp_path):
        cfg_a = write_config(tmp_path / "a")
        cfg_b = write_config(tmp_path / "b")
        assert main(["--config", str(cfg_a), "--seed", "5", "run"]) == 0
        assert main(["--config", str(cfg_b), "--seed", "5", "run"]) == 0
        a = (tmp_path / "a" / "out" / "grasps_ranked.csv").read_bytes()
        b = (tmp_path / "b" / "out" / "grasps_ranked.csv").read_bytes()
        assert a == b
