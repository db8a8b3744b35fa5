"""Tests for the command-line surface and its exit codes."""
import json

import pytest

from app import EXIT_CONFIG, EXIT_ERROR, EXIT_OK, EXIT_USAGE, main
from commands.common import parse_overrides
from core.errors import ConfigError


def test_no_command_is_a_usage_error(capsys):
    assert main([]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag_is_a_usage_error():
    assert main(["gen-scene"]) == EXIT_USAGE


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "gsdf" in capsys.readouterr().out


def test_gen_scene_writes_a_dataset(tmp_path):
    out = tmp_path / "data"
    code = main(["gen-scene", "--out", str(out), "--preset", "sphere", "--views", "8", "--res", "8", "--test_stride=4"])
    assert code == EXIT_OK
    assert json.loads((out / "split.json").read_text())["test"] == [0, 4]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen-scene"
    assert manifest["exit_status"] == 0


@pytest.mark.parametrize("extra", [
    ["--views", "4"],
    ["--preset", "teapot"],
    ["--no_such_key", "1"],
    ["--orbit_radius"],
])
def test_bad_scene_config_exits_with_config_status(tmp_path, extra):
    argv = ["gen-scene", "--out", str(tmp_path / "data"), "--res", "8"] + extra
    assert main(argv) == EXIT_CONFIG


def test_missing_train_config_exits_with_config_status(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path), "--run-dir", str(tmp_path / "run"),
                 "--config", str(tmp_path / "missing.yaml")])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_dataset_is_a_runtime_error(tmp_path):
    code = main(["train", "--data", str(tmp_path / "nowhere"), "--run-dir", str(tmp_path / "run")])
    assert code == EXIT_ERROR


def test_parse_overrides():
    assert parse_overrides(["--sampler.k_coarse", "4", "--losses.lambda-d=0.2"]) == {
        "sampler.k_coarse": "4", "losses.lambda_d": "0.2",
    }


@pytest.mark.parametrize("tokens", [["stray"], ["--dangling"], ["--"]])
def test_malformed_overrides(tokens):
    with pytest.raises(ConfigError):
        parse_overrides(tokens)


TINY_OVERRIDES = [
    "--gs_warmup_iters", "2", "--sdf_warmup_iters", "1", "--joint_iters", "2",
    "--rays_per_step", "32", "--eikonal_points", "16", "--curvature_points", "8", "--mesh_resolution", "16",
    "--field.grid.levels", "2", "--field.grid.base_resolution", "2", "--field.grid.max_resolution", "4",
    "--field.grid.table_size", "1024", "--field.hidden_dim", "16", "--field.color_hidden_dim", "16",
    "--schedule.initial_active_levels", "1", "--sampler.samples_per_range", "8",
    "--init.count", "100", "--density.interval", "1",
]


@pytest.mark.slow
def test_end_to_end_pipeline(tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-scene", "--out", str(data), "--preset", "sphere", "--views", "8", "--res", "16"]) == EXIT_OK
    assert main(["train", "--data", str(data), "--run-dir", str(run)] + TINY_OVERRIDES) == EXIT_OK
    checkpoint = run / "checkpoints" / "iter_000005.pt"
    assert checkpoint.exists()
    assert (run / "gaussians.ply").exists()
    assert json.loads((run / "config.json").read_text())["joint_iters"] == 2

    assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(data), "--out", str(run / "eval"),
                 "--chamfer-points", "1000"]) == EXIT_OK
    assert (run / "eval" / "summary.csv").exists()
    assert main(["render", "--checkpoint", str(checkpoint), "--data", str(data), "--branch", "sdf",
                 "--out", str(run / "views")]) == EXIT_OK
    assert (run / "views" / "sdf_000_depth.pfm").exists()
    assert main(["extract-mesh", "--checkpoint", str(checkpoint), "--out", str(run / "mesh.obj"),
                 "--resolution", "8"]) == EXIT_OK
    assert (run / "mesh.obj").exists()


def test_checkpoint_commands_reject_overrides(tmp_path):
    code = main(["extract-mesh", "--checkpoint", str(tmp_path / "x.pt"), "--out", str(tmp_path / "m.ply"),
                 "--iso", "0", "--losses.lambda_d", "0"])
    assert code == EXIT_CONFIG
