import json
import os

import numpy as np
import pytest

from levy_rds import ConfigError
from levy_rds.harness import (
    CHECKS_BY_KIND,
    component_seed,
    default_config,
    load_config,
    resolve_seed,
    run,
    run_check,
    verify_manifest,
)
from levy_rds.harness.cli import main
from levy_rds.harness.seeding import ENV_SEED
from levy_rds.levy_paths import read_path_csv


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="jump_rte"):
        load_config("[triplet]\njump_rte = 2.0\n")


def test_unknown_section_and_syntax():
    with pytest.raises(ConfigError, match="plots"):
        load_config("[plots]\nx = 1\n")
    with pytest.raises(ConfigError, match="syntax"):
        load_config("[numerics\n")


def test_type_errors_name_the_key():
    with pytest.raises(ConfigError, match="n_paths"):
        load_config("[numerics]\nn_paths = 1.5\n")
    with pytest.raises(ConfigError, match="kind"):
        load_config('[experiment]\nkind = "nonsense"\n')
    with pytest.raises(ConfigError, match="horizon"):
        load_config("[numerics]\nhorizon = [1.0, 3.0]\n")


def test_anchor_lattice_sorted_unique():
    cfg = load_config("[numerics]\nanchors = [0.5, -0.5, 0.0, 0.5]\n")
    assert cfg["numerics"]["anchors"] == [-0.5, 0.0, 0.5]


def test_minimal_config_defaults():
    cfg = load_config('[experiment]\nkind = "simulate-levy"\n')
    assert cfg.kind == "simulate-levy" and cfg.seed == 0
    assert cfg["triplet"]["jump_rate"] == 2.0


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(ENV_SEED, raising=False)
    assert resolve_seed(3) == 3
    monkeypatch.setenv(ENV_SEED, "9")
    assert resolve_seed(3) == 9
    assert resolve_seed(3, 12) == 12
    monkeypatch.setenv(ENV_SEED, "x")
    with pytest.raises(ConfigError):
        resolve_seed(3)


def test_component_streams_independent():
    assert component_seed(0, "a") != component_seed(0, "b")
    assert component_seed(0, "a") == component_seed(0, "a")
    assert component_seed(0, "a") != component_seed(1, "a")


def test_kind_table_complete():
    keys = CHECKS_BY_KIND["verify-all"]
    assert [k[:3] for k in keys] == [f"c{i:02d}" for i in range(1, 14)]
    assert CHECKS_BY_KIND["simulate-levy"] == []
    parts = [k for kind, ks in CHECKS_BY_KIND.items() if kind != "verify-all" for k in ks]
    assert sorted(parts) == sorted(keys[:12])


def test_simulate_levy_run(tmp_path):
    cfg = default_config("simulate-levy", seed=4).replace(output=str(tmp_path / "a"))
    manifest, results = run(cfg)
    assert manifest.passed and results == []
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == ["levy_path.csv", "manifest.json", "report.txt"]
    assert verify_manifest(str(tmp_path / "a")) == []
    table = read_path_csv(str(tmp_path / "a" / "levy_path.csv"))
    assert table.t[0] == -25.0 and table.t[-1] == 3.0
    assert table.L[np.argmin(np.abs(table.t))][0] == 0.0
    data = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert data["config"]["experiment"]["seed"] == 4
    # tampering is detected
    with open(tmp_path / "a" / "levy_path.csv", "a") as fh:
        fh.write("\n")
    assert verify_manifest(str(tmp_path / "a")) == ["levy_path.csv"]


def test_simulate_levy_deterministic(tmp_path):
    a = default_config("simulate-levy", seed=7).replace(output=str(tmp_path / "a"))
    b = default_config("simulate-levy", seed=7).replace(output=str(tmp_path / "b"))
    run(a), run(b)
    assert (tmp_path / "a" / "levy_path.csv").read_bytes() == (tmp_path / "b" / "levy_path.csv").read_bytes()


def test_check_error_is_recorded():
    cfg = load_config("[system]\nB0 = [[1.0, 0.0]]\n")
    res = run_check("c04_ito_conjugacy", cfg)
    assert not res.passed and res.error


def test_quick_check_writes_tables():
    res = run_check("c01_marcus_chain_rule", default_config())
    assert res.passed
    assert res.tables


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(ENV_SEED, raising=False)
    assert main(["simulate-levy", "--out", str(tmp_path / "o"), "--quiet"]) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text("[triplet]\njump_rte = 1\n")
    assert main(["simulate-levy", "--config", str(bad), "--out", str(tmp_path / "p")]) == 2
    assert "jump_rte" in capsys.readouterr().err
    good = tmp_path / "good.toml"
    good.write_text("[experiment]\nseed = 5\n")
    assert main(["simulate-levy", "--config", str(good), "--seed", "6", "--out", str(tmp_path / "q"), "--quiet"]) == 0
    assert json.loads((tmp_path / "q" / "manifest.json").read_text())["config"]["experiment"]["seed"] == 6


def test_ito_conjugacy_experiment_csv(tmp_path):
    cfg = load_config(
        '[experiment]\nkind = "ito-conjugacy"\noutput = "%s"\n[numerics]\ndt = 1e-2\nt_end = 0.5\n'
        % (tmp_path / "ic")
    )
    from levy_rds.harness.runner import _experiment_tables

    tables = _experiment_tables(cfg)
    rows = tables["ito_conjugacy_residual"].splitlines()
    assert rows[0].startswith("t,")
    assert float(rows[1].split(",")[1]) <= 1e-8
    assert np.isfinite(float(rows[-1].split(",")[1]))
