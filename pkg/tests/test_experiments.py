import csv
import json
import math

import pytest

from toda_lab import cli
from toda_lab.experiments import ACCEPTANCE_KEYS, ConfigError, ExperimentConfig


def _run(tmp_path, name, *args):
    out = tmp_path / name
    code = cli.main(list(args) + ["--output_dir", str(out)])
    return code, out


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _all_csv_bytes(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def test_overrides_parsing():
    got = cli.parse_overrides(["--N", "32", "--T=1.5", "--zeta_mode", "two_n_inverse",
                               "--K_grid", "[1,2]"])
    assert got == {"N": 32, "T": 1.5, "zeta_mode": "two_n_inverse", "K_grid": [1, 2]}
    with pytest.raises(ConfigError):
        cli.parse_overrides(["--N"])
    with pytest.raises(ConfigError):
        cli.parse_overrides(["N", "3"])


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"experiment": "evolve", "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"experiment": "evolve", "beta": -1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"experiment": "evolve", "N": 2.5})
    # alpha = 0 is rejected where the relation needs its sign
    beta0 = math.exp(0.42278433509846713)
    with pytest.raises(ConfigError, match="degenerate"):
        ExperimentConfig.from_mapping({"experiment": "scattering", "beta": beta0, "theta": 2.0})
    ExperimentConfig.from_mapping({"experiment": "spectrum", "beta": beta0, "theta": 2.0})


def test_unknown_subcommand_and_key(tmp_path):
    assert cli.main(["nonsense"]) == 2
    code, _ = _run(tmp_path, "o", "evolve", "--frobnicate", "1")
    assert code == 2
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert cli.main(["evolve", "--config", str(bad)]) == 2


def test_deterministic_outputs(tmp_path):
    args = ["evolve", "--N", "16", "--T", "1", "--replicas", "2", "--seed", "5"]
    c1, o1 = _run(tmp_path, "a", *args)
    c2, o2 = _run(tmp_path, "b", *args)
    assert c1 == c2 == 0
    assert _all_csv_bytes(o1) == _all_csv_bytes(o2)
    assert (o1 / "summary.json").read_bytes() == (o2 / "summary.json").read_bytes()
    m1 = json.loads((o1 / "manifest.json").read_text())
    m2 = json.loads((o2 / "manifest.json").read_text())
    assert m1["config_sha256"] == m2["config_sha256"] and m1["seed"] == 5


def test_replica_streams_independent_of_batching(tmp_path):
    base = ["spectrum", "--N", "12", "--seed", "3", "--transfer_trials", "3"]
    _, pooled = _run(tmp_path, "pooled", *base, "--replicas", "4")
    for r in range(4):
        _, single = _run(tmp_path, f"single{r}", *base, "--replicas", "1", "--replica_offset", str(r))
        name = f"replica_{r:04d}/rows.csv"
        assert (pooled / name).read_bytes() == (single / name).read_bytes()


def test_parallel_matches_serial(tmp_path, monkeypatch):
    base = ["thouless", "--N", "16", "--replicas", "3", "--seed", "1"]
    monkeypatch.setenv("TODA_LAB_THREADS", "1")
    _, serial = _run(tmp_path, "serial", *base)
    monkeypatch.setenv("TODA_LAB_THREADS", "2")
    _, par = _run(tmp_path, "par", *base)
    assert _all_csv_bytes(serial) == _all_csv_bytes(par)


def test_thouless_cli(tmp_path):
    code, out = _run(tmp_path, "t", "thouless", "--N", "32", "--replicas", "100")
    assert code == 0
    for r in range(100):
        rows = _read(out / f"replica_{r:04d}" / "rows.csv")
        vals = [float(row[4]) for row in rows[1:] if row[3] == "max_residual"]
        assert len(vals) == 1 and vals[0] <= 1e-9
    summary = json.loads((out / "summary.json").read_text())
    assert summary["acceptance"]["AC3"]["status"] == "pass"


def test_scattering_schema_and_summary(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"N": 64, "T": 2.0}))
    code, out = _run(tmp_path, "s", "scattering", "--config", str(cfg), "--seed", "7")
    assert code == 0
    rows = _read(out / "replica_0000" / "scattering_report.csv")
    assert rows[0] == ["k", "lambda", "Q0", "QT", "residual", "normalized_residual", "bulk_flag"]
    assert len(rows) == 65
    summary = json.loads((out / "summary.json").read_text())
    assert "median_normalized_residual" in summary
    assert set(summary["acceptance"]) == set(ACCEPTANCE_KEYS)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7 and manifest["config"]["N"] == 64


def test_velocity_schema(tmp_path):
    code, out = _run(tmp_path, "v", "velocity", "--N", "64", "--T", "2")
    assert code == 0
    rows = _read(out / "replica_0000" / "velocity.csv")
    assert rows[0] == ["k", "lambda", "v_solved", "v_empirical"]
    assert len(rows) == 65


def test_csv_has_no_nan(tmp_path):
    for exp in ("sample", "centers", "charges"):
        code, out = _run(tmp_path, exp, exp, "--N", "32", "--T", "1", "--m_max", "1")
        assert code == 0
        for p in out.rglob("*.csv"):
            text = p.read_text().lower()
            assert "nan" not in text


def test_row_keys_unique(tmp_path):
    _, out = _run(tmp_path, "e", "evolve", "--N", "16", "--T", "1")
    rows = _read(out / "replica_0000" / "rows.csv")
    assert rows[0] == ["experiment", "replica", "time", "key", "value"]
    keys = [(r[0], r[1], r[2], r[3]) for r in rows[1:]]
    assert len(keys) == len(set(keys))


def test_numerical_failure_exit_code(tmp_path):
    code, out = _run(tmp_path, "f", "scattering", "--N", "32", "--T", "1", "--zeta_mode", "0.95")
    assert code == 3
    assert (out / "replica_0000" / "FAILED").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "partial" and summary["failed_replicas"] == [0]


@pytest.mark.slow
def test_scattering_end_to_end_full_size(tmp_path):
    code, out = _run(tmp_path, "big", "scattering", "--N", "512", "--T", "20")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert isinstance(summary["median_normalized_residual"], float)


@pytest.mark.slow
def test_velocity_end_to_end_full_size(tmp_path):
    code, out = _run(tmp_path, "bigv", "velocity", "--N", "1024", "--T", "32")
    assert code == 0
    rows = _read(out / "replica_0000" / "velocity.csv")
    assert len(rows) == 1025
