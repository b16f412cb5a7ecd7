import os

import numpy as np
import pytest

from coresel.cli import build_stream, load_corpora, main
from coresel.config import parse_config, render_manifest
from coresel.errors import ConfigError

MINIMAL = """\
[stream]
num_tasks = 2
train_per_task = 40
test_per_task = 20

[data]
synthetic_train = 200
synthetic_test = 80

[train]
stream_batch_size = 20
kappa = 5
hidden = 16

[experiment]
strategies = ocs,uniform
num_seeds = 2
output_dir = {out}
"""


def write_config(tmp_path, name="exp.ini", **fmt):
    fmt.setdefault("out", str(tmp_path / "runs"))
    path = tmp_path / name
    path.write_text(MINIMAL.format(**fmt))
    return str(path)


# ---------------------------------------------------------------------------
# parsing


def test_defaults_from_empty_config():
    cfg = parse_config(None, env={})
    assert cfg.kappa == 10
    assert cfg.tau == 1000.0
    assert cfg.lam == 1.0
    assert cfg.stream_batch_size == 100
    assert cfg.strategies == ("ocs",)


def test_file_values_and_flag_precedence(tmp_path):
    path = write_config(tmp_path)
    cfg = parse_config(path, env={})
    assert cfg.kappa == 5 and cfg.num_tasks == 2
    cfg = parse_config(path, {"kappa": "3", "tau": "0.5"}, env={})
    assert cfg.kappa == 3 and cfg.tau == 0.5


def test_env_overrides_file_but_not_flags(tmp_path):
    path = write_config(tmp_path)
    env = {"CORESEL_OUTPUT_DIR": "/tmp/env-runs"}
    assert parse_config(path, env=env).output_dir == "/tmp/env-runs"
    assert parse_config(path, {"output_dir": "flag-runs"}, env=env).output_dir == "flag-runs"


def test_unknown_key_names_key_and_line(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nkapa = 5\n")
    with pytest.raises(ConfigError, match=r"kapa.*line 2"):
        parse_config(str(path), env={})


def test_parse_errors_are_specific(tmp_path):
    cases = [
        ("[nope]\n", r"unknown section.*nope.*line 1"),
        ("kappa = 5\n", r"before any \[section\].*line 1"),
        ("[train]\nkappa = ten\n", r"key 'kappa' must be an integer.*'ten'.*line 2"),
        ("[train]\nkappa 5\n", r"expected 'key = value'.*line 2"),
        ("[train]\nkappa = 5\nkappa = 6\n", r"duplicate key 'kappa'.*line 3"),
        ("[data]\nkappa = 5\n", r"unknown key 'kappa' in section \[data\].*line 2"),
        ("[stream]\nvariant = wobbly\n", r"key 'variant'.*'wobbly'.*line 2"),
    ]
    for text, pattern in cases:
        path = tmp_path / "case.ini"
        path.write_text(text)
        with pytest.raises(ConfigError, match=pattern):
            parse_config(str(path), env={})


def test_cross_field_validation(tmp_path):
    with pytest.raises(ConfigError, match="kappa.*stream_batch_size"):
        parse_config(None, {"kappa": "200", "stream_batch_size": "100"}, env={})
    with pytest.raises(ConfigError, match="num_seeds"):
        parse_config(None, {"num_seeds": "0"}, env={})
    with pytest.raises(ConfigError, match="strategies"):
        parse_config(None, {"strategies": "ocs,herding"}, env={})
    with pytest.raises(ConfigError, match="train_images"):
        parse_config(None, {"source": "idx"}, env={})


def test_manifest_round_trip(tmp_path):
    path = write_config(tmp_path)
    cfg = parse_config(path, {"tau": "250.0", "grad_layers": "0,2", "batch_sizes": "5,full"}, env={})
    manifest = tmp_path / "manifest.ini"
    manifest.write_text(render_manifest(cfg))
    assert parse_config(str(manifest), env={}) == cfg


# ---------------------------------------------------------------------------
# orchestration


def run_cli(args, env, monkeypatch):
    for name in ("CORESEL_OUTPUT_DIR",):
        monkeypatch.delenv(name, raising=False)
    for name, value in env.items():
        monkeypatch.setenv(name, value)
    return main(args)


def test_run_experiment_artifacts_and_determinism(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    assert run_cli(["run", "--config", path], {}, monkeypatch) == 0
    out = tmp_path / "runs"
    summary = (out / "summary.csv").read_text()
    lines = summary.strip().splitlines()
    assert lines[0] == "strategy,runs,accuracy_mean,accuracy_std,forgetting_mean,forgetting_std"
    assert len(lines) == 3
    assert lines[1].startswith("ocs,2,") and lines[2].startswith("uniform,2,")
    for strategy in ("ocs", "uniform"):
        for seed in (0, 1):
            assert (out / f"{strategy}-seed{seed}" / "accuracy_matrix.csv").exists()

    # identical config → bit-identical summary
    assert run_cli(["run", "--config", path], {}, monkeypatch) == 0
    assert (out / "summary.csv").read_text() == summary

    # replaying the recorded manifest reproduces the summary too
    assert run_cli(["run", "--config", str(out / "run_manifest.ini")], {}, monkeypatch) == 0
    assert (out / "summary.csv").read_text() == summary


def test_run_partial_failure_exit_code(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    calls = {"n": 0}
    import coresel.cli as cli_mod

    real = cli_mod.run_stream

    def flaky(stream, cfg, out_dir=None):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("synthetic failure")
        return real(stream, cfg, out_dir)

    monkeypatch.setattr(cli_mod, "run_stream", flaky)
    assert run_cli(["run", "--config", path], {}, monkeypatch) == 2
    out = tmp_path / "runs"
    assert "synthetic failure" in (out / "ocs-seed1" / "FAILED.txt").read_text()
    lines = (out / "summary.csv").read_text().strip().splitlines()
    assert lines[1].startswith("ocs,1,")  # one surviving ocs run aggregated
    assert lines[2].startswith("uniform,2,")


def test_config_error_exit_code(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nkapa = 1\n")
    assert run_cli(["run", "--config", str(bad)], {}, monkeypatch) == 1
    assert "kapa" in capsys.readouterr().err


def test_diagnose_writes_table(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    args = ["diagnose", "--config", path, "--batch-sizes", "10,full", "--n-batches", "3"]
    assert run_cli(args, {}, monkeypatch) == 0
    lines = (tmp_path / "runs" / "diagnostic_table.csv").read_text().strip().splitlines()
    assert lines[0] == "batch_size,mean_l2,mean_cosine,cross_l2,cross_cosine"
    assert len(lines) == 3
    full_row = lines[2].split(",")
    assert full_row[0] == "200"
    assert float(full_row[1]) == pytest.approx(0.0, abs=1e-12)
    assert float(full_row[2]) == pytest.approx(1.0, abs=1e-12)
    assert full_row[3] != "" and full_row[4] != ""  # cross-dataset columns populated

    again = ["diagnose", "--config", path, "--batch-sizes", "10,full", "--n-batches", "3"]
    text = (tmp_path / "runs" / "diagnostic_table.csv").read_text()
    assert run_cli(again, {}, monkeypatch) == 0
    assert (tmp_path / "runs" / "diagnostic_table.csv").read_text() == text


def test_diagnose_without_cross_dataset(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    args = ["diagnose", "--config", path, "--batch-sizes", "10", "--n-batches", "2", "--cross", "false"]
    assert run_cli(args, {}, monkeypatch) == 0
    row = (tmp_path / "runs" / "diagnostic_table.csv").read_text().strip().splitlines()[1]
    assert row.endswith(",,")


def test_dump_coreset_roundtrip(tmp_path, monkeypatch, capsys):
    path = write_config(tmp_path)
    assert run_cli(["run", "--config", path, "--strategies", "ocs", "--num-seeds", "1"], {}, monkeypatch) == 0
    run_dir = str(tmp_path / "runs" / "ocs-seed0")
    capsys.readouterr()  # drop the run command's log lines
    assert main(["dump-coreset", run_dir]) == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("task_id,class,example_index_in_source,px0")
    target = tmp_path / "copy.csv"
    assert main(["dump-coreset", run_dir, "--out", str(target)]) == 0
    assert target.read_text() == stdout
    assert main(["dump-coreset", str(tmp_path / "missing")]) == 1


def test_imbalanced_and_noisy_streams_from_config(tmp_path):
    path = write_config(tmp_path)
    cfg = parse_config(path, {"variant": "imbalanced", "imbalance_keep": "0.25"}, env={})
    train, test = load_corpora(cfg)
    stream = build_stream(cfg, train, test, run_seed=3)
    counts = np.bincount(stream.tasks[0].train.y, minlength=10)
    assert counts.max() > counts[counts > 0].min()  # reduced classes actually smaller
    cfg = parse_config(path, {"variant": "noisy", "noise_fraction": "0.5"}, env={})
    stream = build_stream(cfg, train, test, run_seed=3)
    assert len(stream.tasks[0].noisy_source) == 20  # 0.5 * 40
