import click
import numpy as np
import pytest
from click.testing import CliRunner

from stein_select.main import cli, parse_kernel, parse_policy, parse_seeds
from stein_select.results import read_csv
from stein_select.schemas import KernelFamily, PerDimPolicy, PitmanYorPolicy


@pytest.fixture
def runner():
    return CliRunner()


def test_option_parsers():
    assert parse_seeds(None, None, "0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds(None, None, "3,1") == [3, 1]
    assert parse_policy(None, None, "perdim:5") == PerDimPolicy(c_b=5.0)
    assert parse_policy(None, None, "pitman-yor:0.5,1,0.2") == PitmanYorPolicy(alpha=0.5, theta_py=1.0, d_py=0.2)
    assert parse_kernel(None, None, "rbf:2").bandwidth == 2.0
    assert parse_kernel(None, None, "imq").family == KernelFamily.FACTORED_IMQ
    for bad in ("perdim", "bogus:1", "pitman-yor:2,1,0.2"):
        with pytest.raises(click.BadParameter):
            parse_policy(None, None, bad)
    with pytest.raises(click.BadParameter):
        parse_kernel(None, None, "imq:0.5,1")


def test_toy_command(runner, tmp_path):
    out = tmp_path / "toy"
    result = runner.invoke(cli, [
        "toy", "--scenario", "nested_ms", "--scores", "svc,k_d", "--n-grid", "30,60", "--seeds", "0..1",
        "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "results.csv")
    assert {r.score for r in rows} == {"svc", "k_d"}
    assert (out / "config.json").exists()
    assert (out / "plot_nested_ms_svc.svg").exists()


def test_toy_rejects_bad_policy(runner, tmp_path):
    result = runner.invoke(cli, ["toy", "--scenario", "ds", "--policy", "perdim:-1", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_toy_rejects_matched_policy(runner, tmp_path):
    result = runner.invoke(cli, ["toy", "--scenario", "ds", "--policy", "matched", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_select_gaussian(runner, tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(120, 3))
    path = tmp_path / "demo.csv"
    path.write_text("a,b,c\n" + "\n".join(",".join(repr(float(v)) for v in row) for row in x) + "\n")
    out = tmp_path / "select"
    result = runner.invoke(cli, [
        "select", "--input", str(path), "--model", "gaussian", "--kernel", "rbf:1", "--t", "5",
        "--policy", "perdim:5", "--no-plot", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "results.csv")
    loo = [r for r in rows if r.score == "bic"]
    assert [r.foreground for r in loo] == ["2-3", "1-3", "1-2"]
    assert all(r.seed == "-" and r.scenario == "demo" for r in rows)
    assert not list(out.glob("*.svg"))


def test_select_requires_latent_dim_for_ppca(runner, tmp_path):
    path = tmp_path / "demo.csv"
    path.write_text("1,2\n3,5\n4,4\n")
    result = runner.invoke(cli, ["select", "--input", str(path), "--out", str(tmp_path / "o")])
    assert result.exit_code == 2


def test_select_reports_ingestion_errors(runner, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2\n3,x\n")
    result = runner.invoke(cli, [
        "select", "--input", str(path), "--model", "gaussian", "--out", str(tmp_path / "o"),
    ])
    assert result.exit_code == 4


def test_calibrate_gaussian(runner, tmp_path):
    out = tmp_path / "cal"
    result = runner.invoke(cli, [
        "calibrate", "--model", "gaussian", "--n", "100", "--draws", "3", "--no-plot", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert "T-hat median" in result.output
    rows = read_csv(out / "results.csv")
    assert [r.seed for r in rows] == ["0", "1", "2", "median"]


def test_unknown_log_level(runner, tmp_path):
    result = runner.invoke(cli, ["--log-level", "chatty", "calibrate", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_results_are_byte_identical_across_runs(runner, tmp_path):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = runner.invoke(cli, [
            "toy", "--scenario", "ds", "--scores", "svc,k_a", "--n-grid", "40", "--seeds", "0,1",
            "--no-limits", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        outputs.append((out / "results.csv").read_bytes())
    assert outputs[0] == outputs[1]
