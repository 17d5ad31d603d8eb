import csv
import json

import pytest

from spde_lab.cli import describe_seeds, main
from spde_lab.config import config_hash, parse_seed_range, resolve
from spde_lab.errors import ConfigError


def data_rows(path):
    return [line for line in path.read_text().splitlines() if not line.startswith("#")]


def metadata(path):
    return [line for line in path.read_text().splitlines() if line.startswith("#")]


def write(tmp_path, text):
    p = tmp_path / "exp.toml"
    p.write_text(text)
    return str(p)


def test_kernel_band_defaults(tmp_path):
    assert main(["--experiment", "kernel-band", "--out", str(tmp_path)]) == 0
    out = tmp_path / "kernel-band.csv"
    rows = list(csv.DictReader(data_rows(out)))
    assert len(rows) == 150
    ratios = [float(r["ratio"]) for r in rows]
    assert min(ratios) > 0 and max(ratios) / min(ratios) < 10
    meta = metadata(out)
    assert any(m.startswith("# config_sha256: ") for m in meta)
    cfg = json.loads(next(m for m in meta if m.startswith("# config: "))[len("# config: "):])
    assert cfg["params"]["n_gaps"] == 30
    assert meta[-1] == "# status: ok"


def test_identical_runs_give_identical_rows(tmp_path):
    cfg = write(tmp_path, 'experiment = "gaussian-variance"\nn_seeds = 20\n'
                          '[grid]\nnt = 32\nnx = 8\n[params]\nheat_nts = [16, 32]\nheat_nx = 16\n')
    assert main(["--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["--config", cfg, "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    a = tmp_path / "a" / "gaussian-variance.csv"
    b = tmp_path / "b" / "gaussian-variance.csv"
    assert data_rows(a) == data_rows(b)
    sha = [m for m in metadata(a) + metadata(b) if m.startswith("# config_sha256")]
    assert sha[0] == sha[1]


def test_permanent_exposes_base_case(tmp_path):
    assert main(["--experiment", "permanent", "--out", str(tmp_path)]) == 0
    first = next(csv.DictReader(data_rows(tmp_path / "permanent.csv")))
    assert first["instance"] == "sigma=(1,1)"
    assert float(first["printed_base"]) == 2.0 and float(first["ryser"]) == 3.0


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = write(tmp_path, 'experiment = "kernel-band"\n\n[params]\nn_gaps = 10\nn_gapz = 3\n')
    assert main(["--config", cfg, "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "exp.toml:5:" in err and "params.n_gapz" in err


def test_type_error_reports_field(tmp_path, capsys):
    cfg = write(tmp_path, 'experiment = "moments"\n[grid]\nnt = "many"\n')
    assert main(["--config", cfg]) == 1
    assert "grid.nt" in capsys.readouterr().err


def test_section_not_used_by_experiment(tmp_path, capsys):
    cfg = write(tmp_path, 'experiment = "permanent"\n[drift]\nname = "sign"\n')
    assert main(["--config", cfg]) == 1
    assert "takes no [drift]" in capsys.readouterr().err


def test_unknown_drift_parameter():
    with pytest.raises(ConfigError, match="drift.slope"):
        resolve({"experiment": "ladder-convergence", "drift": {"name": "step", "slope": 2.0}})
    cfg = resolve({"experiment": "malliavin-compare", "drift": {"name": "smooth-sine", "omega": 2}})
    assert cfg["drift"] == {"name": "smooth-sine", "omega": 2.0}


def test_malformed_toml(tmp_path, capsys):
    cfg = write(tmp_path, 'experiment = "moments\n')
    assert main(["--config", cfg]) == 1
    assert "exp.toml" in capsys.readouterr().err


def test_missing_experiment(capsys):
    assert main([]) == 1
    assert "no experiment" in capsys.readouterr().err


def test_numerical_error_keeps_partial_rows(tmp_path, capsys):
    cfg = write(tmp_path, 'experiment = "malliavin-compare"\nn_seeds = 3\n'
                          '[grid]\nnt = 32\nnx = 8\n[params]\nn_paths = 10\n')
    assert main(["--config", cfg, "--out", str(tmp_path)]) == 2
    out = tmp_path / "malliavin-compare.csv"
    assert len(data_rows(out)) > 1
    assert metadata(out)[-1].startswith("# error: DomainError")
    assert "numerical error" in capsys.readouterr().err


def test_seed_flags():
    assert parse_seed_range("3..6") == [3, 4, 5, 6]
    with pytest.raises(ConfigError):
        parse_seed_range("6..3")
    cfg = resolve({"experiment": "moments", "seed": 10, "n_seeds": 3})
    assert cfg["seeds"] == [10, 11, 12]
    assert resolve({"experiment": "moments", "seeds": "0..4"})["n_seeds"] == 5
    with pytest.raises(ConfigError, match="duplicate"):
        resolve({"experiment": "moments", "seeds": [1, 1]})
    assert describe_seeds([4, 5, 6]) == "4..6 (3)"
    assert describe_seeds([1, 5]) == "1,5 (2)"


def test_threads_environment_fallback(monkeypatch):
    monkeypatch.setenv("SPDE_LAB_THREADS", "3")
    assert resolve({"experiment": "permanent"})["threads"] == 3
    assert resolve({"experiment": "permanent", "threads": 2})["threads"] == 2
    monkeypatch.setenv("SPDE_LAB_THREADS", "x")
    with pytest.raises(ConfigError, match="SPDE_LAB_THREADS"):
        resolve({"experiment": "permanent"})


def test_hash_ignores_output_and_threads():
    a = resolve({"experiment": "permanent", "out": "x", "threads": 1})
    b = resolve({"experiment": "permanent", "out": "y", "threads": 4})
    c = resolve({"experiment": "permanent", "seed": 1})
    assert config_hash(a) == config_hash(b) != config_hash(c)


def test_list(capsys):
    assert main(["--list"]) == 0
    assert "simplex-beta" in capsys.readouterr().out
