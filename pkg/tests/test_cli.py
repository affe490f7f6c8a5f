import csv
import io
import subprocess
import sys

import pytest

from slowfast import cli

from oracles import T1, X1, Y1, left_root

LOOSE = """# coercivity constants too tight for the sampled region
name = loose
n = 1
T = 0.6
f = x1^4/4 - x1^2/2 - t*x1
c0 = 3
a0 = 4.5
y0 = -1
"""


def run(*argv):
    out = io.StringIO()
    code = cli.main(list(argv), stdout=out)
    return code, out.getvalue()


def rows(text):
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(body))


def comments(text):
    return [ln for ln in text.splitlines() if ln.startswith("#")]


def test_help_lists_commands_and_flags(capsys):
    assert run("--help")[0] == 0
    text = capsys.readouterr().out
    for name in cli.COMMANDS:
        assert name in text
    assert run("pipeline", "--help")[0] == 0
    text = capsys.readouterr().out
    for flag in ("--scenario", "--out-dir", "--jobs", "--set", "--force"):
        assert flag in text


def test_console_script_entry_point():
    p = subprocess.run([sys.executable, "-m", "slowfast.cli", "critical", "--scenario", "dwell", "--t", "0"],
                       capture_output=True, text=True)
    assert p.returncode == 0 and p.stdout.startswith("t,x1,lambda_min,class")


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["check"],
        ["check", "--scenario", "nope"],
        ["check", "--scenario", "dwell", "--set", "nope=1"],
        ["check", "--scenario", "dwell", "--set", "ode_tol=abc"],
        ["check", "--scenario", "dwell", "--set", "ode_tol"],
        ["check", "--scenario", "dwell", "--jobs", "0"],
        ["critical", "--scenario", "dwell", "--t", "5"],
        ["simulate", "--scenario", "dwell", "--eps", "0.01", "--perturb", "1,2"],
        ["verify", "--scenario", "dwell", "--eps", "0.01,-1"],
        ["fast", "--scenario", "dwell", "--fold-index", "2"],
    ],
)
def test_usage_errors(argv, capsys):
    assert run(*argv)[0] == cli.EXIT_USAGE
    capsys.readouterr()


def test_parse_error_reports_position(tmp_path, capsys):
    p = tmp_path / "bad.scn"
    p.write_text(LOOSE.replace("f = x1^4/4", "f = x1^4/x1"))
    assert run("check", "--scenario", str(p))[0] == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "bad.scn:5:" in err and "denominator" in err


def test_check_pass():
    code, out = run("check", "--scenario", "dwell")
    assert code == 0
    assert out.splitlines()[-1] == "verdict PASS"
    assert all(ln.startswith(("PASS", "scenario", "verdict")) for ln in out.splitlines())


def test_check_writes_into_out_dir(tmp_path):
    code, out = run("check", "--scenario", "dwell", "--out-dir", str(tmp_path), "--out", "check.txt")
    assert code == 0 and out == ""
    assert "verdict PASS" in (tmp_path / "check.txt").read_text()


def test_critical_csv_round_trips():
    code, out = run("critical", "--scenario", "dwell", "--t", "0.2")
    assert code == 0
    r = rows(out)
    assert [x["class"] for x in r] == ["min", "saddle", "min"]
    assert float(r[0]["x1"]) == pytest.approx(left_root(0.2), abs=1e-15)
    assert r[0]["x1"] == "-0.87888506624997287"


def test_slow_csv():
    code, out = run("slow", "--scenario", "dwell")
    assert code == 0
    r = rows(out)
    folds = [x for x in r if x["event"] == "fold"]
    assert len(folds) == 1 and float(folds[0]["t"]) == pytest.approx(T1)
    assert float(folds[0]["x1"]) == pytest.approx(X1)
    assert {x["branch_index"] for x in r} == {"1", "2"}
    ts = [float(x["t"]) for x in r if x["branch_index"] == "2"]
    assert ts[0] == pytest.approx(T1) and ts[-1] == pytest.approx(0.6)


def test_fast_csv():
    code, out = run("fast", "--scenario", "dwell")
    assert code == 0
    r = rows(out)
    f = [float(x["f_value"]) for x in r]
    assert f[0] > f[-1]
    assert float(r[-1]["x1"]) == pytest.approx(Y1, abs=1e-9)
    assert any(c.startswith("# landing") for c in comments(out))


def test_gate_blocks_and_force_watermarks(tmp_path, capsys):
    p = tmp_path / "loose.scn"
    p.write_text(LOOSE)
    code, out = run("slow", "--scenario", str(p))
    assert code == cli.EXIT_ASSUMPTION and out == ""
    assert "FAIL coercivity" in capsys.readouterr().err
    code, out = run("slow", "--scenario", str(p), "--force")
    assert code == 0 and out.splitlines()[0] == cli.WATERMARK


def test_assumption_failures_exit_one(capsys):
    assert run("slow", "--scenario", "saddle_landing")[0] == cli.EXIT_ASSUMPTION
    assert run("slow", "--scenario", "cubic_degenerate", "--force")[0] == cli.EXIT_ASSUMPTION
    capsys.readouterr()


def test_numerical_failure_exits_three(capsys):
    code, _ = run("fast", "--scenario", "dwell", "--set", "s_budget=1e-3", "--force")
    assert code == cli.EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_simulate_csv():
    code, out = run("simulate", "--scenario", "quadratic", "--eps", "0.1", "--perturb", "1")
    assert code == 0
    r = rows(out)
    assert float(r[0]["x1"]) == pytest.approx(0.1)
    assert float(r[-1]["t"]) == 1.0
    assert "# bound_violations 0" in comments(out)


def test_simulate_records_events():
    code, out = run("simulate", "--scenario", "dwell", "--eps", "0.01")
    assert code == 0
    events = [c.split()[2] for c in comments(out) if c.startswith("# event")]
    assert events == ["exit_delta", "last_entry_delta"]


def test_verify_csv():
    code, out = run("verify", "--scenario", "dwell", "--eps", "0.01,0.001")
    assert code == 0
    r = rows(out)
    assert [float(x["eps"]) for x in r] == [0.01, 0.001]
    assert float(r[1]["graph_dist"]) < float(r[0]["graph_dist"])
    assert "sup_err_off_jumps=insufficient rungs" in comments(out)[-1]


def test_fmt_round_trips():
    for v in (0.1, 1 / 3, -2.5e-300, 1e300, 0.0):
        assert float(cli.fmt(v)) == v


def test_check_reports_fold_scalars():
    _, out = run("check", "--scenario", "dwell")
    assert "b=-1" in out and "c=-3.4641016151377544" in out
    code, out = run("check", "--scenario", "quadratic")
    assert code == 0 and "PASS folds: no degenerate critical points" in out


def test_pipeline_files_and_single_rung(tmp_path):
    code, _ = run("pipeline", "--scenario", "dwell", "--out-dir", str(tmp_path), "--eps", "0.5")
    assert code == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["branch.csv", "het_1.csv", "report.csv", "traj_eps_0.5.csv"]
    report = (tmp_path / "report.csv").read_text()
    assert len(rows(report)) == 1
    assert "insufficient rungs" in comments(report)[-1]
