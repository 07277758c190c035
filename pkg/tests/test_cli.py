import json
from pathlib import Path

import pytest

from freebound import cli, wkb
from freebound.errors import ConfigError

BS1 = {
    "model": {"n": 1, "strike": 100.0, "horizon": 1.0, "rate": 0.05,
              "covariance": {"name": "black-scholes", "vols": [0.2]}},
    "grid": {"n_time": 16},
}


def _write(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    cfg = dict(cfg)
    cfg.setdefault("output", str(tmp_path / "out"))
    path.write_text(json.dumps(cfg, indent=2))
    return path


def _header(path):
    return dict(line[2:].split("=", 1) for line in Path(path).read_text().splitlines() if line.startswith("# "))


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("solve")
    cfg = _write(tmp, BS1)
    assert cli.main(["solve", str(cfg)]) == cli.EXIT_OK
    return cfg, tmp / "out"


# config handling

def test_missing_config_names_path(tmp_path, capsys):
    path = tmp_path / "absent.json"
    assert cli.main(["solve", str(path)]) == cli.EXIT_ERROR
    assert str(path) in capsys.readouterr().err


def test_unknown_key_reported_with_line(tmp_path, capsys):
    cfg = dict(BS1, solver={"tolerance": 1e-3})
    path = _write(tmp_path, cfg)
    assert cli.main(["solve", str(path)]) == cli.EXIT_ERROR
    err = capsys.readouterr().err
    line = next(i for i, s in enumerate(path.read_text().splitlines(), 1) if '"tolerance"' in s)
    assert f"{path}:{line}: solver.tolerance:" in err


def test_invalid_json_reported_with_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "model": {\n    "n": 1,,\n  }\n}\n')
    assert cli.main(["solve", str(path)]) == cli.EXIT_ERROR
    assert f"{path}:3: invalid JSON" in capsys.readouterr().err


def test_value_constraints_enforced(tmp_path):
    cfg = dict(BS1, solver={"rho_factor": 2.0})
    with pytest.raises(ConfigError, match="solver.rho_factor"):
        cli.load_config(_write(tmp_path, cfg))


def test_defaults_recorded_in_resolved_config(solved):
    _, out = solved
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["config"]["solver"]["eps"] == 1e-3
    assert resolved["config"]["quadrature"]["kind"] == "gauss-legendre-tensor"
    assert resolved["config_hash"] == _header(out / "boundary.csv")["config_hash"]


def test_hash_ignores_output_and_workers(tmp_path):
    base = cli.load_config(_write(tmp_path, BS1))
    moved = cli.load_config(_write(tmp_path, BS1, "b.json"), {"output": "elsewhere", "workers": 4})
    reseeded = cli.load_config(_write(tmp_path, BS1, "c.json"), {"seed": 5})
    assert base.digest() == moved.digest()
    assert base.digest() != reseeded.digest()


def test_worker_count_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FREEBOUND_WORKERS", "3")
    args = cli.build_parser().parse_args(["solve", str(tmp_path / "x.json")])
    assert cli._overrides(args)["workers"] == 3


# solve

def test_solve_writes_artifacts(solved):
    _, out = solved
    for name in ("boundary.csv", "greeks.csv", "report.json", "state.json", "resolved_config.json", "timings.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["converged"] and report["config_hash"] == _header(out / "greeks.csv")["config_hash"]


def test_solve_reproduces_identical_files(solved, tmp_path):
    cfg, out = solved
    again = tmp_path / "again"
    assert cli.main(["solve", str(cfg), "--output", str(again)]) == cli.EXIT_OK
    for name in ("boundary.csv", "greeks.csv", "report.json", "state.json"):
        assert (again / name).read_bytes() == (out / name).read_bytes(), name


def test_iteration_cap_exits_two_with_partial_surfaces(tmp_path):
    path = _write(tmp_path, BS1)
    assert cli.main(["solve", str(path), "--max-iter", "1"]) == cli.EXIT_MAX_ITER
    assert (tmp_path / "out" / "boundary.csv").exists()
    assert not json.loads((tmp_path / "out" / "report.json").read_text())["converged"]


def test_solver_failure_exits_one(tmp_path, capsys):
    cfg = json.loads(json.dumps(BS1))
    cfg["model"]["covariance"]["vols"] = [0.0]
    assert cli.main(["solve", str(_write(tmp_path, cfg))]) == cli.EXIT_ERROR
    assert "ellipticity" in capsys.readouterr().err


# greeks

def test_greeks_from_saved_state(solved, tmp_path):
    cfg, out = solved
    copy = tmp_path / "copy"
    copy.mkdir()
    (copy / "state.json").write_bytes((out / "state.json").read_bytes())
    assert cli.main(["greeks", str(cfg), "--output", str(copy)]) == cli.EXIT_OK
    assert (copy / "greeks.csv").read_bytes() == (out / "greeks.csv").read_bytes()


def test_greeks_without_state_fails(tmp_path):
    assert cli.main(["greeks", str(_write(tmp_path, BS1))]) == cli.EXIT_ERROR


# oracle comparison

def test_compare_against_itself_is_zero(solved):
    cfg, out = solved
    assert cli.main(["oracle-compare", str(cfg), "--oracle", "file", "--oracle-csv", str(out / "boundary.csv")]) == 0
    diff = json.loads((out / "comparison_file.json").read_text())
    assert diff["max_rel_err"] == 0.0
    assert all(row["max_rel_err"] == 0.0 for row in diff["per_time"])


def test_compare_requires_prior_solve(tmp_path, capsys):
    assert cli.main(["oracle-compare", str(_write(tmp_path, BS1))]) == cli.EXIT_ERROR
    assert "run 'solve' first" in capsys.readouterr().err


def test_benchmark_against_binomial(tmp_path):
    cfg = Path(__file__).resolve().parent.parent / "configs" / "bs1d.json"
    out = tmp_path / "bs1d"
    assert cli.main(["solve", str(cfg), "--output", str(out)]) == cli.EXIT_OK
    assert cli.main(["oracle-compare", str(cfg), "--output", str(out)]) == cli.EXIT_OK
    diff = json.loads((out / "comparison_binomial.json").read_text())
    assert diff["max_rel_err"] < 0.02
    rows = (out / "comparison_binomial.csv").read_text().splitlines()
    assert rows[0] == "t,xhat,solver,oracle,rel_err"
    assert (out / "oracle_binomial.csv").exists()


def test_coarse_basket_against_psor(tmp_path):
    cfg = {
        "model": {"n": 2, "strike": 100.0, "horizon": 1.0, "rate": 0.05,
                  "covariance": {"name": "black-scholes", "vols": [0.2, 0.2], "corr": 0.0}},
        "grid": {"n_time": 16, "n_angle": 17},
        "solver": {"greeks": False, "fit_stride": 4},
        "oracle": {"kind": "psor", "grid": [120, 100]},
    }
    path = _write(tmp_path, cfg)
    assert cli.main(["solve", str(path)]) == cli.EXIT_OK
    assert cli.main(["oracle-compare", str(path)]) == cli.EXIT_OK
    assert json.loads((tmp_path / "out" / "comparison_psor.json").read_text())["max_rel_err"] < 0.03


def test_binomial_oracle_refuses_baskets(tmp_path):
    cfg = cli.load_config(_write(tmp_path, {
        "model": {"n": 2, "strike": 100.0, "horizon": 1.0,
                  "covariance": {"name": "black-scholes", "vols": [0.2, 0.2], "corr": 0.0}},
    }))
    with pytest.raises(ConfigError, match="one asset"):
        cli._oracle_for(cfg, cfg.build_model(), "binomial", None)
    with pytest.raises(ConfigError, match="needs a path"):
        cli._oracle_for(cfg, cfg.build_model(), "file", None)


# density audit

def test_audit_constant_coefficients_passes(tmp_path):
    cfg = {"model": BS1["model"], "audit": {"points": 50}}
    assert cli.main(["density-audit", str(_write(tmp_path, cfg))]) == cli.EXIT_OK
    assert "passed" in (tmp_path / "out" / "audit.csv").read_text()


def test_audit_variable_coefficients_improves_with_order(tmp_path):
    cfg = Path(__file__).resolve().parent.parent / "configs" / "cev2d_audit.json"
    out = tmp_path / "cev"
    assert cli.main(["density-audit", str(cfg), "--output", str(out)]) == cli.EXIT_OK
    rows = {}
    for line in (out / "audit.csv").read_text().splitlines():
        if line and not line.startswith("#") and not line.startswith("check"):
            name, value, *_ = line.split(",")
            rows[name] = float(value)
    assert rows["residual_order1"] < rows["residual_order0"]


def test_audit_degenerate_volatility_exits_one(tmp_path):
    cfg = {"model": {"n": 1, "strike": 100.0, "horizon": 1.0,
                     "covariance": {"name": "black-scholes", "vols": [0.0]}}}
    assert cli.main(["density-audit", str(_write(tmp_path, cfg))]) == cli.EXIT_ERROR


def test_audit_failure_exits_three_and_lists_rows(tmp_path, monkeypatch, capsys):
    real = wkb.invariant_suite

    def failing(*args, **kwargs):
        checks, samples = real(*args, **kwargs)
        return checks + [wkb.AuditCheck("normalization", 0.5, 1e-3)], samples

    monkeypatch.setattr(wkb, "invariant_suite", failing)
    cfg = {"model": BS1["model"], "audit": {"points": 50}}
    assert cli.main(["density-audit", str(_write(tmp_path, cfg))]) == cli.EXIT_AUDIT
    assert "FAILED normalization" in capsys.readouterr().err
