import math

import numpy as np
import pytest

from gossipsim import cli
from gossipsim.compression import Identity, Qsgd, RandK, RescaledUnbiased, TopK
from gossipsim.harness import (
    CheckOutcome,
    ConfigError,
    GridSpec,
    grid_search,
    parse_compression,
    parse_suite_file,
    run_suite,
    summarize,
    theory_check,
)
from gossipsim.objectives import QuadraticObjective
from gossipsim.optimize import PracticalSchedule, SgdConfig, run_optimization
from gossipsim.records import OptimizeRecord, format_value, write_rows_csv
from gossipsim.streams import stream
from gossipsim.topology import Ring, build_gossip_matrix

SUITE = """\
[avg-exact]
kind = consensus
topology = ring
n = 5
d = 8
scheme = exact
iters = 20
eval_every = 5
seeds = 1 2 3

[sgd-quad]
kind = optimize
topology = full
n = 4
d = 6
objective = quadratic
schedule = practical
a = 0.05
b = 6
iters = 15
eval_every = 5
seeds = 4 5
"""


class TestParseCompression:
    def test_forms(self):
        assert parse_compression("identity", 100) == Identity()
        assert parse_compression("rand_k:0.01", 2000) == RandK(20)
        assert parse_compression("rand_k:7", 100) == RandK(7)
        assert parse_compression("top_k:0.1", 50) == TopK(5)
        assert parse_compression("qsgd:256", 10) == Qsgd(256)
        assert parse_compression("unbiased:rand_k:0.01", 2000) == RescaledUnbiased(RandK(20))

    def test_value_bits_flow_through(self):
        spec = parse_compression("top_k:2", 16, value_bits=64)
        assert spec == TopK(2, value_bits=64)

    def test_rejects_unknown(self):
        with pytest.raises(ConfigError):
            parse_compression("zipzap:3", 10)
        with pytest.raises(ConfigError):
            parse_compression("rand_k", 10)
        with pytest.raises(ConfigError):
            parse_compression("qsgd:lots", 10)


class TestSuiteFile:
    def test_parse(self, tmp_path):
        path = tmp_path / "suite.ini"
        path.write_text(SUITE)
        specs = parse_suite_file(path)
        assert [s.label for s in specs] == ["avg-exact", "sgd-quad"]
        assert specs[0].seeds == [1, 2, 3]
        assert specs[1].options["a"] == 0.05

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "suite.ini"
        path.write_text("[x]\nkind = consensus\ntopologee = ring\n")
        with pytest.raises(ConfigError, match="unknown keys.*topologee"):
            parse_suite_file(path)

    def test_duplicate_seeds_rejected(self, tmp_path):
        path = tmp_path / "suite.ini"
        path.write_text("[x]\nkind = consensus\nseeds = 1 1\n")
        with pytest.raises(ConfigError, match="distinct"):
            parse_suite_file(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "suite.ini"
        path.write_text("")
        with pytest.raises(ConfigError, match="no experiments"):
            parse_suite_file(path)

    def test_bad_kind_rejected(self, tmp_path):
        path = tmp_path / "suite.ini"
        path.write_text("[x]\nkind = banana\n")
        with pytest.raises(ConfigError, match="kind"):
            parse_suite_file(path)


class TestRunSuite:
    def test_outputs_per_seed_plus_summary(self, tmp_path):
        config = tmp_path / "suite.ini"
        config.write_text(SUITE)
        outcome = run_suite(config, tmp_path / "out")
        assert not outcome.failures
        names = sorted(p.name for p in outcome.written)
        assert names == [
            "avg-exact_seed1.csv",
            "avg-exact_seed2.csv",
            "avg-exact_seed3.csv",
            "avg-exact_summary.csv",
            "sgd-quad_seed4.csv",
            "sgd-quad_seed5.csv",
            "sgd-quad_summary.csv",
        ]
        header = (tmp_path / "out" / "avg-exact_seed1.csv").read_text().splitlines()[0]
        assert header == "iter,error,lyapunov,bits,mean_drift"
        header = (tmp_path / "out" / "sgd-quad_seed4.csv").read_text().splitlines()[0]
        assert header == "iter,subopt,dispersion,bits,eta"
        summary_header = (tmp_path / "out" / "avg-exact_summary.csv").read_text().splitlines()[0]
        assert summary_header == (
            "iter,error_mean,error_std,lyapunov_mean,lyapunov_std,"
            "bits_mean,bits_std,mean_drift_mean,mean_drift_std"
        )

    def test_rerun_byte_identical(self, tmp_path):
        config = tmp_path / "suite.ini"
        config.write_text(SUITE)
        run_suite(config, tmp_path / "a")
        run_suite(config, tmp_path / "b")
        for path_a in sorted((tmp_path / "a").iterdir()):
            path_b = tmp_path / "b" / path_a.name
            assert path_a.read_bytes() == path_b.read_bytes(), path_a.name

    def test_logistic_experiment_without_explicit_dim(self, tmp_path):
        data = tmp_path / "train.svm"
        data.write_text("+1 1:1.0 2:0.5\n-1 1:-1.0\n+1 2:1.0\n-1 2:-0.5\n")
        config = tmp_path / "suite.ini"
        config.write_text(
            "[logit]\nkind = optimize\ntopology = ring\nn = 2\n"
            f"objective = logistic\ndata_path = {data}\npartition = sorted\n"
            "schedule = practical\na = 0.1\nb = 2\niters = 10\nseeds = 1\n"
        )
        outcome = run_suite(config, tmp_path / "out")
        assert not outcome.failures
        assert any(p.name == "logit_seed1.csv" for p in outcome.written)

    def test_partial_failure_continues(self, tmp_path):
        config = tmp_path / "suite.ini"
        config.write_text(
            SUITE
            + "\n[diverges]\nkind = consensus\ntopology = ring\nn = 9\nd = 200\n"
            "scheme = paired\ncompression = unbiased:rand_k:2\niters = 400\n"
            "eval_every = 10\nseeds = 3\n"
        )
        outcome = run_suite(config, tmp_path / "out")
        assert len(outcome.failures) == 1
        assert outcome.failures[0][0] == "diverges"
        assert any(p.name == "avg-exact_seed1.csv" for p in outcome.written)


class TestSummarize:
    def test_cross_check_against_two_pass(self):
        recs = []
        rng = stream(3)
        for seed in range(4):
            rows = [
                OptimizeRecord(t, float(rng.random()), float(rng.random()), t * 10, 0.1)
                for t in range(6)
            ]
            recs.append(rows)
        header, rows = summarize(recs)
        assert header[0] == "iter" and header[1] == "subopt_mean"
        for i, row in enumerate(rows):
            vals = np.array([float(r[i].subopt) for r in recs])
            # two-pass oracle
            mean = sum(vals) / 4.0
            var = sum((v - mean) ** 2 for v in vals) / 4.0
            assert abs(row[1] - mean) <= 1e-12
            assert abs(row[2] - math.sqrt(var)) <= 1e-12

    def test_mismatched_grids_rejected(self):
        a = [OptimizeRecord(0, 1.0, 1.0, 0, 0.1)]
        b = [OptimizeRecord(0, 1.0, 1.0, 0, 0.1), OptimizeRecord(1, 1.0, 1.0, 0, 0.1)]
        with pytest.raises(ValueError):
            summarize([a, b])


class TestCsvFormat:
    def test_schema_constants_match_record_fields(self):
        from dataclasses import fields

        from gossipsim.records import (
            CONSENSUS_COLUMNS,
            OPTIMIZE_COLUMNS,
            ConsensusRecord,
        )

        assert [f.name for f in fields(ConsensusRecord)] == CONSENSUS_COLUMNS
        assert [f.name for f in fields(OptimizeRecord)] == OPTIMIZE_COLUMNS

    def test_seventeen_significant_digits(self):
        assert format_value(1.0 / 3.0) == "0.33333333333333331"
        assert format_value(123) == "123"
        assert format_value(0.1) == "0.10000000000000001"
        # round-trips exactly through text
        for v in (1.0 / 3.0, 1e-300, math.pi, -0.0):
            assert float(format_value(v)) == v

    def test_write_rows(self, tmp_path):
        path = tmp_path / "t.csv"
        write_rows_csv(path, ["a", "b"], [(1, 0.5), (2, 1.5)])
        assert path.read_text(encoding="utf-8") == "a,b\n1,0.5\n2,1.5\n"


class TestGridSearch:
    def make_base(self, n=9):
        matrix = build_gossip_matrix(Ring(n))
        return SgdConfig(
            matrix=matrix, schedule=PracticalSchedule(1.0, 1.0, 1), averaging="exact",
            iters=1, seed=2, f_star=None,
        )

    def quad(self, d, n, noise=0.2):
        targets = stream(55, tag="targets").standard_normal((d, n))
        return QuadraticObjective(targets, noise_sigma=noise)

    def test_singleton_grid(self):
        base = self.make_base()
        objective = self.quad(6, 9)
        grid = GridSpec(a_exponents=(-1,), b_factors=(6.0,), budget_epochs=5)
        a, b, _ = grid_search(base, grid, objective, np.zeros((6, 9)))
        assert (a, b) == (0.1, 6.0)

    def test_divergent_point_skipped(self):
        base = self.make_base()
        objective = self.quad(6, 9)
        grid = GridSpec(a_exponents=(-1, 4), b_factors=(1.0,), budget_epochs=20)
        a, b, final = grid_search(base, grid, objective, np.zeros((6, 9)))
        assert a == 0.1 and math.isfinite(final)

    def test_all_divergent_raises(self):
        base = self.make_base()
        objective = self.quad(6, 9)
        grid = GridSpec(a_exponents=(5, 6), b_factors=(1.0,), budget_epochs=20)
        with pytest.raises(RuntimeError, match="diverged"):
            grid_search(base, grid, objective, np.zeros((6, 9)))

    def test_selected_a_within_one_notch_of_fine_grid(self):
        # oracle: a 10x finer logarithmic grid evaluated the same way
        base = self.make_base()
        d, n = 6, 9
        objective = self.quad(d, n)
        epochs = 30
        grid = GridSpec(a_exponents=(-3, -2, -1, 0, 1), b_factors=(float(d),), budget_epochs=epochs)
        a_coarse, _, _ = grid_search(base, grid, objective, np.zeros((d, n)))
        from gossipsim.objectives import solve_reference

        _, f_star = solve_reference(objective)
        iters = epochs * math.ceil(n / n)
        best = None
        for tenth in range(-30, 11):
            a = 10.0 ** (tenth / 10.0)
            config = SgdConfig(
                matrix=base.matrix, schedule=PracticalSchedule(a, float(d), 1),
                averaging="exact", iters=iters * 1, seed=base.seed, eval_every=iters,
                f_star=f_star,
            )
            try:
                final = run_optimization(config, objective, np.zeros((d, n))).records[-1].subopt
            except Exception:
                continue
            if best is None or final < best[0]:
                best = (final, a)
        assert abs(math.log10(a_coarse) - math.log10(best[1])) <= 1.0 + 1e-9


class TestTheoryCheck:
    def test_all_pass(self):
        outcomes = theory_check("all")
        kinds = {o.kind for o in outcomes}
        assert kinds == {"exact_rate", "tracking_rate", "mixing", "omega_contract", "identity_reduction"}
        for o in outcomes:
            assert o.passed, o.line()

    def test_line_format(self):
        outcome = CheckOutcome("exact_rate", "demo", True, 1.0, 2.0)
        assert outcome.line() == "PASS exact_rate demo observed=1 bound=2"

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            theory_check("nonsense")


class TestCli:
    def test_consensus_run_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "run.csv"
        code = cli.main([
            "consensus", "--topology", "ring", "--n", "6", "--d", "8",
            "--scheme", "tracking", "--compression", "top_k:2", "--gamma", "auto",
            "--iters", "20", "--seed", "1", "--out", str(out),
        ])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "iter,error,lyapunov,bits,mean_drift"
        assert "error=" in capsys.readouterr().out

    def test_optimize_run(self, tmp_path, capsys):
        out = tmp_path / "run.csv"
        code = cli.main([
            "optimize", "--topology", "full", "--n", "4", "--d", "5",
            "--objective", "quadratic", "--schedule", "practical", "--a", "0.05",
            "--b", "5", "--iters", "10", "--seed", "2", "--out", str(out),
        ])
        assert code == 0
        assert out.read_text().splitlines()[0] == "iter,subopt,dispersion,bits,eta"
        assert "avg_subopt=" in capsys.readouterr().out

    def test_config_error_exit_code(self, capsys):
        code = cli.main([
            "consensus", "--topology", "ring", "--n", "6", "--d", "8",
            "--compression", "nonsense:1",
        ])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_check_command(self, tmp_path, capsys):
        out = tmp_path / "report.csv"
        code = cli.main(["check", "--kind", "mixing", "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert stdout.count("PASS mixing") == 6
        assert out.read_text().splitlines()[0] == "kind,name,passed,observed,bound"

    def test_suite_via_config_flag(self, tmp_path, capsys):
        config = tmp_path / "suite.ini"
        config.write_text(SUITE)
        code = cli.main([
            "consensus", "--config", str(config), "--out-dir", str(tmp_path / "res"),
        ])
        assert code == 0
        assert (tmp_path / "res" / "avg-exact_summary.csv").exists()
        # only consensus sections ran under the consensus subcommand
        assert not (tmp_path / "res" / "sgd-quad_summary.csv").exists()

    def test_suite_kind_mismatch_is_config_error(self, tmp_path, capsys):
        config = tmp_path / "suite.ini"
        config.write_text("[only-avg]\nkind = consensus\ntopology = ring\nn = 4\nd = 4\niters = 2\n")
        code = cli.main([
            "optimize", "--config", str(config), "--out-dir", str(tmp_path / "res"),
        ])
        assert code == 2
        assert "no optimize experiments" in capsys.readouterr().err

    def test_optimize_logistic_from_file(self, tmp_path, capsys):
        data = tmp_path / "train.svm"
        data.write_text("+1 1:1.0 2:0.5\n-1 1:-1.0\n+1 2:1.0\n-1 2:-0.5\n")
        code = cli.main([
            "optimize", "--topology", "ring", "--n", "2", "--objective", "logistic",
            "--data", str(data), "--partition", "sorted", "--schedule", "practical",
            "--a", "0.1", "--b", "2", "--iters", "20", "--seed", "3",
        ])
        assert code == 0
        assert "subopt=" in capsys.readouterr().out

    def test_consensus_init_from_file(self, tmp_path, capsys):
        init = tmp_path / "init.txt"
        rows = stream(4, tag="init").standard_normal((3, 5))  # one node per row
        np.savetxt(init, rows)
        out = tmp_path / "run.csv"
        code = cli.main([
            "consensus", "--topology", "ring", "--n", "3", "--d", "5",
            "--init", "file", "--init-file", str(init), "--iters", "10",
            "--out", str(out),
        ])
        assert code == 0
        first = out.read_text().splitlines()[1].split(",")
        want = float(np.sum((rows.T - rows.T.mean(axis=1, keepdims=True)) ** 2))
        assert float(first[1]) == pytest.approx(want, rel=1e-12)

    def test_custom_topology_from_edge_file(self, tmp_path, capsys):
        edges = tmp_path / "edges.txt"
        edges.write_text("0 1\n1 2\n2 3\n3 0\n")
        code = cli.main([
            "consensus", "--topology", "custom", "--edges-file", str(edges),
            "--d", "4", "--iters", "5",
        ])
        assert code == 0

    def test_partial_suite_failure_exit_code(self, tmp_path, capsys):
        config = tmp_path / "suite.ini"
        config.write_text(
            SUITE
            + "\n[diverges]\nkind = consensus\ntopology = ring\nn = 9\nd = 200\n"
            "scheme = paired\ncompression = unbiased:rand_k:2\niters = 400\n"
            "eval_every = 10\nseeds = 3\n"
        )
        code = cli.main([
            "consensus", "--config", str(config), "--out-dir", str(tmp_path / "res"),
        ])
        assert code == 1
        assert "FAILED diverges" in capsys.readouterr().err

    def test_sweep_command(self, capsys):
        code = cli.main([
            "sweep", "--topology", "ring", "--n", "4", "--d", "4",
            "--objective", "quadratic", "--a-exp-min", "-1", "--a-exp-max", "0",
            "--epochs", "3", "--seed", "1",
        ])
        assert code == 0
        assert "best a=" in capsys.readouterr().out
