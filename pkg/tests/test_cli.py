"""Tests for the config-driven benchmark CLI and its report writers.

Golden-file checks pin the shared CSV schema; the behavioural tests run
a deliberately tiny advection config so the whole module stays fast.
Exit-code contract: 0 success, 2 usage error, 3 non-convergence,
4 invariant failure.
"""

import csv
import json
import os
from pathlib import Path

import pytest

from ttmfg import cli
from ttmfg.reporting import (
    CSV_COLUMNS,
    ExperimentReport,
    ReportRow,
    RunSpec,
    load_report,
    parse_config,
    report_fit,
    run_experiment,
    verify_invariants,
    write_report,
)

TINY_CONFIG = """\
# two-rung density march, small enough for a unit test
benchmark = advection_diffusion
dim = 2
n_steps = 2, 4
density_degree = 7
density_ranks = 3
validation_points = 2000
"""

GOLDEN_HEADER = (
    "benchmark,scheme,dim,nu,grid_n,n_steps,dt,e2_u,einf_u,order_u,"
    "e2_m,einf_m,order_m,min_probe,mass_defect,moment_defect,"
    "iterations,converged,cpu_seconds"
)


def tiny_config_file(tmp_path, extra=""):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG + extra)
    return path


def read_rows(csv_path):
    with open(csv_path, newline="") as handle:
        return list(csv.DictReader(handle))


def synthetic_report(dim, cpu, benchmark="local_mfg", scheme="sl2p"):
    spec = RunSpec(benchmark=benchmark, scheme=scheme, dim=dim,
                   n_steps=(4,), figures=False)
    row = ReportRow(benchmark=benchmark, scheme=scheme, dim=dim, nu=1.0,
                    n_steps=4, dt=0.25, e2_u=1e-3, cpu_seconds=cpu)
    return ExperimentReport(spec=spec, rows=[row])


class TestConfigParsing:
    def test_family_defaults_fill_in(self):
        spec = parse_config("benchmark = advection_diffusion")
        assert spec.dim == 3
        assert spec.nu == 0.1
        assert spec.n_steps == (2, 4, 8, 16, 32)
        assert spec.density_degree == 15
        assert spec.wrap is True

    def test_overrides_beat_defaults(self):
        spec = parse_config(TINY_CONFIG)
        assert spec.dim == 2
        assert spec.n_steps == (2, 4)
        assert spec.validation_points == 2000

    def test_comments_and_blanks_ignored(self):
        spec = parse_config("\n# note\nbenchmark = positivity  # trailing\n\n")
        assert spec.benchmark == "positivity"
        assert spec.dim == 8

    def test_bool_values(self):
        for raw, expected in (("true", True), ("0", False), ("yes", True)):
            spec = parse_config(f"benchmark = positivity\nwrap = {raw}")
            assert spec.wrap is expected
        with pytest.raises(ValueError, match="boolean"):
            parse_config("benchmark = positivity\nwrap = maybe")

    def test_missing_benchmark(self):
        with pytest.raises(ValueError, match="benchmark"):
            parse_config("dim = 3")

    def test_unknown_benchmark_lists_names(self):
        with pytest.raises(ValueError, match="nonlocal_mfg"):
            parse_config("benchmark = bogus")

    def test_unknown_key_lists_known(self):
        with pytest.raises(ValueError, match="known keys"):
            parse_config("benchmark = positivity\nshoesize = 42")

    def test_duplicate_key(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_config("benchmark = positivity\ndim = 2\ndim = 3")

    def test_empty_step_list(self):
        with pytest.raises(ValueError, match="key=value"):
            parse_config("benchmark = positivity\nn_steps =")

    def test_malformed_line(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_config("benchmark = positivity\nnonsense")

    def test_label_defaults(self):
        spec = parse_config("benchmark = nonlocal_mfg\nscheme = sl1")
        assert spec.resolved_label() == "nonlocal_mfg_sl1_d3"
        sweep = parse_config("benchmark = dim_sweep")
        assert sweep.resolved_label() == "dim_sweep_sl2p"


class TestRunReports:
    @pytest.fixture(scope="class")
    @classmethod
    def tiny_report(cls):
        spec = parse_config(TINY_CONFIG)
        return run_experiment(spec)

    def test_csv_header_is_frozen(self, tiny_report):
        assert tiny_report.csv_text().splitlines()[0] == GOLDEN_HEADER
        assert ",".join(CSV_COLUMNS) == GOLDEN_HEADER

    def test_row_fields(self, tiny_report):
        rows = tiny_report.rows
        assert [r.n_steps for r in rows] == [2, 4]
        assert all(r.converged for r in rows)
        assert all(r.e2_m > 0 for r in rows)
        assert rows[0].order_m is None and rows[1].order_m is not None
        # value columns stay empty for a density-only march
        assert rows[0].e2_u is None and rows[0].iterations is None

    def test_manifest_round_trip(self, tiny_report, tmp_path):
        paths = write_report(tiny_report, tmp_path)
        loaded = load_report(paths["manifest"])
        assert loaded.spec == tiny_report.spec
        assert len(loaded.rows) == len(tiny_report.rows)
        assert loaded.rows[1].e2_m == tiny_report.rows[1].e2_m
        for key in ("python", "numpy", "scipy", "timestamp"):
            assert key in loaded.environment

    def test_error_columns_are_deterministic(self):
        spec = parse_config(TINY_CONFIG)
        again = run_experiment(spec)
        first = run_experiment(spec)
        for a, b in zip(first.rows, again.rows):
            assert a.e2_m == b.e2_m
            assert a.einf_m == b.einf_m

    def test_run_requires_steps(self):
        spec = RunSpec(benchmark="positivity", n_steps=())
        with pytest.raises(ValueError, match="n_steps"):
            run_experiment(spec)

    def test_unknown_benchmark_rejected(self):
        spec = RunSpec(benchmark="bogus", n_steps=(2,))
        with pytest.raises(ValueError, match="bogus"):
            run_experiment(spec)

    def test_long_runs_need_opt_in(self):
        spec = RunSpec(benchmark="positivity", n_steps=(2,), long=True)
        with pytest.raises(ValueError, match="--long"):
            run_experiment(spec)


class TestRunCommand:
    def test_run_writes_outputs(self, tmp_path, capsys):
        config = tiny_config_file(tmp_path, f"output = {tmp_path / 'out'}\n")
        assert cli.main(["run", str(config)]) == 0
        out = capsys.readouterr().out
        label = "advection_diffusion_sl2p_d2"
        csv_path = tmp_path / "out" / f"{label}.csv"
        assert csv_path.exists()
        assert (tmp_path / "out" / f"{label}.json").exists()
        assert (tmp_path / "out" / f"{label}_convergence.png").exists()
        assert "csv:" in out and "figure:" in out
        rows = read_rows(csv_path)
        assert len(rows) == 2
        assert rows[0]["converged"] == "true"
        assert rows[0]["e2_u"] == ""

    def test_no_figures_flag(self, tmp_path):
        config = tiny_config_file(tmp_path)
        outdir = tmp_path / "bare"
        code = cli.main(
            ["run", str(config), "--output", str(outdir), "--no-figures"]
        )
        assert code == 0
        assert not list(outdir.glob("*.png"))
        manifest = json.loads(next(outdir.glob("*.json")).read_text())
        assert manifest["figures"] == []

    def test_reruns_match_except_timing(self, tmp_path):
        config = tiny_config_file(tmp_path)
        dirs = (tmp_path / "a", tmp_path / "b")
        for outdir in dirs:
            assert cli.main(
                ["run", str(config), "--output", str(outdir), "--no-figures"]
            ) == 0
        first, second = (read_rows(next(d.glob("*.csv"))) for d in dirs)
        for row_a, row_b in zip(first, second):
            for column in CSV_COLUMNS:
                if column == "cpu_seconds":
                    continue
                assert row_a[column] == row_b[column]

    def test_missing_config_is_usage_error(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "absent.conf")]) == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_bad_key_is_usage_error(self, tmp_path, capsys):
        config = tmp_path / "bad.conf"
        config.write_text("benchmark = positivity\nshoesize = 42\n")
        assert cli.main(["run", str(config)]) == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_long_config_refused_without_flag(self, tmp_path, capsys):
        config = tiny_config_file(tmp_path, "long = true\n")
        assert cli.main(["run", str(config), "--output", str(tmp_path)]) == 2
        assert "--long" in capsys.readouterr().err

    def test_nonconvergence_exit_code(self, tmp_path, capsys):
        config = tmp_path / "stall.conf"
        config.write_text(
            "benchmark = nonlocal_mfg\n"
            "dim = 2\n"
            "n_steps = 2\n"
            "density_degree = 12\n"
            "max_outer = 1\n"
            "stop_tol = 1e-14\n"
            "validation_points = 500\n"
        )
        outdir = tmp_path / "stall"
        code = cli.main(
            ["run", str(config), "--output", str(outdir), "--no-figures"]
        )
        assert code == 3
        assert "NOT CONVERGED" in capsys.readouterr().out
        rows = read_rows(next(outdir.glob("*.csv")))
        assert rows[0]["converged"] == "false"


class TestRulesCommand:
    def test_prints_node_table(self, capsys):
        assert cli.main(["rules", "print", "--kind", "sl2p", "--dim", "5"]) == 0
        out = capsys.readouterr().out
        assert "nodes=51" in out
        assert "moment defect" in out
        # 51 node lines follow the two header lines
        assert sum("[" in line for line in out.splitlines()) == 51

    def test_deterministic_rule(self, capsys):
        assert cli.main(["rules", "print", "--kind", "det", "--dim", "2"]) == 0
        assert "nodes=1" in capsys.readouterr().out

    def test_bad_kind_rejected(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["rules", "print", "--kind", "cubic", "--dim", "2"])
        assert info.value.code == 2


class TestVerifyCommand:
    def test_all_checks_pass(self, capsys):
        assert cli.main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "all invariant checks passed" in out
        assert "FAIL" not in out

    def test_failures_exit_4(self, monkeypatch, capsys):
        from ttmfg.reporting import VerifyCheck

        monkeypatch.setattr(
            "ttmfg.reporting.verify_invariants",
            lambda: [VerifyCheck("broken", False, "forced failure")],
        )
        assert cli.main(["verify"]) == 4
        assert "FAIL broken" in capsys.readouterr().out

    def test_checks_have_details(self):
        checks = verify_invariants()
        names = {c.name for c in checks}
        assert {"moments_sl1", "moments_sl2e", "moments_sl2p",
                "mutation_detected", "tt_vs_dense"} <= names
        assert all(c.detail for c in checks)


class TestReportFit:
    def test_quadratic_cost_recovers_power_two(self):
        reports = [synthetic_report(d, float(d) ** 2) for d in (2, 3, 4, 5)]
        fit = report_fit(reports)
        assert fit["power"]["exponent"] == pytest.approx(2.0, abs=1e-12)
        assert fit["power"]["r_squared"] == pytest.approx(1.0, abs=1e-12)
        assert fit["preferred"] == "power"

    def test_mixed_schemes_rejected(self):
        reports = [synthetic_report(2, 4.0),
                   synthetic_report(3, 9.0, scheme="sl1"),
                   synthetic_report(4, 16.0)]
        with pytest.raises(ValueError, match="share one benchmark"):
            report_fit(reports)

    def test_too_few_dimensions(self):
        with pytest.raises(ValueError, match="three distinct"):
            report_fit([synthetic_report(2, 4.0), synthetic_report(3, 9.0)])

    def test_cli_reads_manifest_directory(self, tmp_path, capsys):
        for d in (2, 3, 4):
            report = synthetic_report(d, 0.5 * d**2)
            write_report(report, tmp_path / f"d{d}")
        paths = [str(tmp_path / f"d{d}") for d in (2, 3, 4)]
        assert cli.main(["report-fit", *paths]) == 0
        out = capsys.readouterr().out
        assert "preferred: power" in out
        assert "b=2" in out

    def test_cli_mismatch_is_usage_error(self, tmp_path, capsys):
        write_report(synthetic_report(2, 4.0), tmp_path)
        write_report(synthetic_report(3, 9.0, scheme="sl1"), tmp_path)
        write_report(synthetic_report(4, 16.0), tmp_path)
        assert cli.main(["report-fit", str(tmp_path)]) == 2
        assert "share one benchmark" in capsys.readouterr().err

    def test_cli_missing_path(self, tmp_path, capsys):
        assert cli.main(["report-fit", str(tmp_path / "nope")]) == 2
        assert "no such path" in capsys.readouterr().err


class TestThreadControl:
    def test_flag_sets_env(self, monkeypatch):
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        assert cli.main(
            ["--threads", "2", "rules", "print", "--kind", "det", "--dim", "1"]
        ) == 0
        assert os.environ["OMP_NUM_THREADS"] == "2"
        assert os.environ["OPENBLAS_NUM_THREADS"] == "2"
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)

    def test_env_var_is_default(self, monkeypatch):
        monkeypatch.setenv("TTMFG_THREADS", "3")
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        assert cli.main(["rules", "print", "--kind", "det", "--dim", "1"]) == 0
        assert os.environ["MKL_NUM_THREADS"] == "3"
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)

    def test_bad_env_var_is_usage_error(self, monkeypatch, capsys):
        monkeypatch.setenv("TTMFG_THREADS", "many")
        assert cli.main(["rules", "print", "--kind", "det", "--dim", "1"]) == 2
        assert "TTMFG_THREADS" in capsys.readouterr().err

    def test_zero_threads_rejected(self, capsys):
        assert cli.main(
            ["--threads", "0", "rules", "print", "--kind", "det", "--dim", "1"]
        ) == 2
        assert "at least 1" in capsys.readouterr().err


class TestShippedConfigs:
    def test_all_configs_parse(self):
        config_dir = Path(__file__).resolve().parents[1] / "configs"
        paths = sorted(config_dir.glob("*.conf"))
        assert len(paths) >= 12
        seen = set()
        for path in paths:
            spec = parse_config(path.read_text())
            assert spec.n_steps
            seen.add(spec.benchmark)
        assert seen == {
            "advection_diffusion", "positivity", "hjb_local", "hjb_grid",
            "local_mfg", "nonlocal_mfg", "dim_sweep",
        }

    def test_heavy_configs_are_marked_long(self):
        config_dir = Path(__file__).resolve().parents[1] / "configs"
        spec = parse_config((config_dir / "hjb_highdim_d50.conf").read_text())
        assert spec.long is True
        assert spec.dim == 50
