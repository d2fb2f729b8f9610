import json
import subprocess
import sys
import textwrap

import pytest

from agemlab.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from agemlab.harness import read_trajectory


@pytest.fixture(autouse=True)
def _outdir(tmp_path, monkeypatch):
    monkeypatch.setenv("AGEMLAB_OUTPUT", str(tmp_path / "out"))
    return tmp_path / "out"


def _cfg(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(textwrap.dedent(text))
    return str(p)


def test_run_example(_outdir, capsys):
    code = main(["run", "--method", "agem", "--objective", "pl_sine", "--theta0", "2",
                 "--eta", "0.01", "--beta", "0.9", "--steps", "10000"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "agem" in out and f"output: {_outdir}" in out
    t = read_trajectory(_outdir / "agem_pl_sine.csv")
    assert len(t) == 10001 and abs(t.theta[-1, 0]) < 1e-6
    man = json.loads((_outdir / "manifest.json").read_text())
    assert "agem_pl_sine.csv" in man["files"]


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--objective", "pl_sine", "--theta0", "2"]) == EXIT_USAGE
    assert "--method" in capsys.readouterr().err
    assert main(["run", "--method", "adam"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    bad = _cfg(tmp_path, "schema: 2\nobjective: pl_sine\ntheta0: [1.0]\nmethods:\n  - {method: adam, eta: 0.1}\n")
    assert main(["compare", "--config", bad]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "methods[0].method" in err and "line 5" in err
    assert main(["run", "--config", _cfg(tmp_path, "")]) == EXIT_USAGE
    assert "parse error" in capsys.readouterr().err


def test_failed_mandatory_run_exits_1():
    code = main(["run", "--method", "gd", "--objective", "quadratic", "--theta0", "1",
                 "--eta", "5", "--steps", "500"])
    assert code == EXIT_FAIL


def test_fig1_writes_four_trajectories(_outdir, capsys):
    assert main(["fig1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert sorted(p.name for p in _outdir.glob("*.csv")) == [
        "aegd_rosenbrock2d.csv", "agem_rosenbrock2d.csv", "gdm_rosenbrock2d.csv", "sgem_rosenbrock2d.csv"]
    first = [l for l in out.splitlines() if l.strip().startswith("1 ")][0]
    assert "agem" in first


def test_fig1_steps_flag_overrides_config(_outdir):
    # with 50 iterations nothing reaches f <= 1e-4, so the "fastest" check fails
    assert main(["fig1", "--steps", "50"]) == EXIT_FAIL
    assert len(read_trajectory(_outdir / "agem_rosenbrock2d.csv")) == 51


def test_flags_override_config(tmp_path, _outdir):
    cfg = _cfg(tmp_path, """\
        schema: 2
        objective: quadratic
        theta0: [1.0]
        budget: 5
        methods:
          - {method: agem, eta: 0.1, beta: 0.5}
    """)
    assert main(["run", "--config", cfg]) == EXIT_OK
    assert len(read_trajectory(_outdir / "agem_quadratic.csv")) == 6
    assert main(["run", "--config", cfg, "--steps", "9", "--output", str(tmp_path / "o2")]) == EXIT_OK
    assert len(read_trajectory(tmp_path / "o2" / "agem_quadratic.csv")) == 10


def test_compare_ranks_runs(_outdir, capsys):
    code = main(["compare", "--objective", "pl_sine", "--theta0", "2", "--methods", "agem", "aegd", "gd",
                 "--eta", "0.05", "--beta", "0.9", "--steps", "3000", "--f-tol", "1e-8"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "rank" in out and len(list(_outdir.glob("*.csv"))) == 3


def test_ode_subcommand(_outdir, capsys):
    code = main(["ode", "--objective", "pl_sine", "--theta0", "2", "--eps", "0.05", "--T", "2"])
    assert code == EXIT_OK
    t = read_trajectory(_outdir / "ode_agem_limit_pl_sine.csv")
    assert t.time[-1] == 2.0
    assert main(["ode", "--objective", "pl_sine", "--theta0", "2", "--eps", "0.05", "--dt", "0.05"]) == EXIT_FAIL


def test_sweep_prints_error_table(_outdir, capsys):
    assert main(["sweep", "--eps", "0.05", "--T", "1", "--etas", "0.02", "0.01", "0.005"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ratio" in out and "consistency" in out
    assert (_outdir / "consistency.csv").exists()


def test_verify_selected(tmp_path, capsys):
    assert main(["verify", "--select", "energy_pl_sine", "--output", str(tmp_path / "v")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "invariants hold" in out and "FAIL" not in out
    assert main(["verify", "--select", "no_such_experiment"]) == EXIT_USAGE


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "agemlab.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("agemlab ")
