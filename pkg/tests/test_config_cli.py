import numpy as np
import pytest

from dualfed.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, main
from dualfed.config import ExperimentConfig, load_config, parse_config, to_ini
from dualfed.data import load_dataset
from dualfed.errors import ConfigError

SMALL_INI = """
[experiment]
scenario = fed_dual_lora
seeds = 0
output = out

[data]
input_dim = 16

[model]
num_blocks = 3
hidden_dim = 8
num_heads = 2
pretrain_steps = 5
pretext_samples = 64

[train]
max_epochs = 2
patience = 5
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI)
    return path


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(to_ini(cfg)) == cfg
    assert load_config(None) == cfg


def test_partial_config_fills_defaults(small_cfg):
    cfg = load_config(small_cfg)
    assert cfg.model.num_blocks == 3 and cfg.model.mlp_ratio == 4
    assert cfg.lora.rank == 4 and cfg.lora.alpha == 8.0
    assert cfg.train.weight_decay == 1e-2


def test_config_errors():
    with pytest.raises(ConfigError, match="train.learning_rate: unknown key"):
        parse_config("[train]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[optim]\nlr = 1\n")
    with pytest.raises(ConfigError, match="scenario"):
        parse_config("[experiment]\nscenario = fed_magic\n")
    with pytest.raises(ConfigError, match="shifts.Nikon"):
        parse_config("[shifts]\nNikon = 1.0\n")
    with pytest.raises(ConfigError, match="lora.blocks"):
        parse_config("[lora]\nblocks = 13\n").train_config()
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


def test_client_sections_override_defaults():
    cfg = parse_config("[shifts]\nCanon = 0.25\n[sigmas]\nGE = 2\n")
    assert dict(cfg.data.shifts)["Canon"] == 0.25
    assert dict(cfg.data.sigmas)["GE"] == 2.0
    assert dict(cfg.data.shifts)["GE"] == 1.5


def test_unknown_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[data]\nshift = 2\n")
    assert main(["run", "--config", str(bad), "--quiet"]) == EXIT_CONFIG
    assert "data.shift: unknown key" in capsys.readouterr().err


def test_dataset_summary(capsys):
    assert main(["dataset", "--summary"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[-1].split() == ["Total", "382", "87", "72", "17", "113", "22"]


def test_dataset_dump(tmp_path, small_cfg):
    path = tmp_path / "d.bin"
    assert main(["dataset", "--config", str(small_cfg), "--seed", "3", "--dump", str(path), "--quiet"]) == EXIT_OK
    fed = load_dataset(path)
    assert fed.geometry.seed == 3 and fed.geometry.input_dim == 16


def test_check_passes_and_fails(capsys):
    assert main(["check", "--quiet", "--trials", "3"]) == EXIT_OK
    assert main(["check", "--tolerance", "1e-30", "--trials", "3"]) == EXIT_CHECK_FAILED
    assert "FAIL" in capsys.readouterr().out


def test_run_writes_outputs_and_repeated_seed_is_identical(tmp_path, small_cfg):
    out = tmp_path / "run"
    assert main(["run", "--config", str(small_cfg), "--seed-override", "7,7", "--output", str(out), "--quiet"]) == 0
    sub = out / "fed_dual_lora"
    assert (sub / "seed0-7.json").read_bytes() == (sub / "seed1-7.json").read_bytes()
    assert (sub / "rounds0-7.ndjson").read_bytes() == (sub / "rounds1-7.ndjson").read_bytes()
    for name in ("summary.tsv", "summary.txt", "manifest.txt"):
        assert (out / name).is_file()
    assert "[experiment]" in (out / "manifest.txt").read_text()


def test_sweep_emits_one_point_per_block_count(tmp_path, small_cfg):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(small_cfg), "--blocks", "1,3", "--output", str(out), "--quiet"]) == 0
    rows = (out / "frontier.tsv").read_text().splitlines()
    assert len(rows) == 3
    ks = [int(r.split("\t")[1]) for r in rows[1:]]
    assert ks == [1, 3]
    bytes_ = [int(r.split("\t")[3]) for r in rows[1:]]
    assert bytes_[0] < bytes_[1]
    assert np.all([r.split("\t")[-1] in ("0", "1") for r in rows[1:]])


def test_output_root_env(tmp_path, small_cfg, monkeypatch):
    monkeypatch.setenv("DUALFED_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", "--config", str(small_cfg), "--quiet"]) == 0
    assert (tmp_path / "root" / "out" / "summary.tsv").is_file()
