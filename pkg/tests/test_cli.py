"""End-to-end command-line tests (in-process via cli.main)."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from direx import cli, pef, planner, protocol
from direx.data import commissioning_counts, commissioning_distribution


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "counts.json").write_text(commissioning_counts().to_json())
    (d / "dist.json").write_text(commissioning_distribution().to_json())
    return d


def run(capsys, *argv) -> tuple[int, str]:
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


class TestFit:
    def test_fit_matches_bundled_distribution(self, workdir, capsys):
        code, out = run(capsys, "fit", workdir / "counts.json")
        assert code == 0
        obj = json.loads(out)
        got = np.array(obj["p"])
        want = commissioning_distribution().table
        assert np.abs(got - want).max() < 1e-6
        assert "manifest_hash" in obj

    def test_fit_csv_input(self, workdir, capsys):
        (workdir / "counts.csv").write_text(commissioning_counts().to_csv())
        code, out = run(capsys, "fit", workdir / "counts.csv")
        assert code == 0

    def test_missing_file_is_input_error(self, workdir, capsys):
        code, _ = run(capsys, "fit", workdir / "nope.json")
        assert code == cli.EXIT_INPUT_ERROR

    def test_malformed_json_is_input_error(self, workdir, capsys):
        bad = workdir / "bad.json"
        bad.write_text("{not json")
        code, _ = run(capsys, "fit", bad)
        assert code == cli.EXIT_INPUT_ERROR


class TestStrength:
    def test_value(self, workdir, capsys):
        code, out = run(capsys, "strength", workdir / "dist.json")
        assert code == 0
        assert json.loads(out)["statistical_strength_bits"] == pytest.approx(
            3.0329e-6, rel=5e-3
        )


class TestPefRoundTrip:
    def test_pef_opt_then_rate(self, workdir, capsys):
        code, out = run(
            capsys,
            "pef-opt", workdir / "dist.json",
            "--beta", "1e-6", "--k", "6", "--optimize-j-mid",
            "--output", workdir / "pef.json",
        )
        assert code == 0
        code, out = run(capsys, "rate", workdir / "pef.json", workdir / "dist.json")
        assert code == 0
        obj = json.loads(out)
        table = pef.build_pef_table(
            commissioning_distribution(), 1e-6, 6, optimize_j_mid=True
        )
        rep = pef.block_gain(table, commissioning_distribution())
        assert obj["g_block_bits"] == pytest.approx(rep.g_block, rel=1e-9)


class TestExtractParams:
    def test_production_budget(self, workdir, capsys):
        code, out = run(
            capsys,
            "extract-params",
            "--m-in", "14698652631040",
            "--sigma-in", "1181264480",
            "--eps-ext", "1.78e-9",
            "--eps", "5.7e-7",
            "--beta", "4.7614e-8",
        )
        assert code == 0
        obj = json.loads(out)
        assert obj["k_out"] == 1_181_264_237
        assert obj["d_s"] == 3_725_074
        assert obj["in_set_X"] is True


class TestSimulateAccumulate:
    def test_roundtrip_matches_in_process(self, workdir, capsys, vertices):
        dist = commissioning_distribution()
        ds = workdir / "ds"
        code, out = run(
            capsys,
            "simulate", workdir / "dist.json",
            "--k", "6", "--blocks", "600", "--seed", "11", "--out", ds,
            "--blocks-per-file", "100", "--files-per-cycle", "3",
            "--calib-trials", "60000", "--trailing-calib-trials", "5000",
        )
        assert code == 0

        beta = 1e-6
        table = pef.build_pef_table(dist, beta, 6, optimize_j_mid=True)
        rep = pef.block_gain(table, dist)
        gmin = planner.threshold_from_sigma(600, rep.g_block, rep.var_block, 2.5)

        code, out = run(
            capsys,
            "accumulate", ds,
            "--beta", str(beta), "--gmin", str(gmin),
            "--j-mid", str(table.j_mid), "--n-calib-min", "60000",
            "--trace", workdir / "trace.csv",
        )
        obj = json.loads(out)

        # in-process oracle: same dataset, same builder, same config
        cycles, _ = protocol.load_dataset(ds)
        cfg = protocol.RunConfig(
            k=6, beta=beta, G_min=gmin, N_b=600, n_calib_min=60000, seed=0
        )
        state, trace = protocol.accumulate(
            cycles, cfg, lambda d: pef.build_pef_table(d, beta, 6, j_mid=table.j_mid)
        )
        assert obj["succeeded"] == state.succeeded
        assert obj["G_run"] == state.G_run  # bit-for-bit
        assert obj["N_run"] == state.N_run
        assert code == (0 if state.succeeded else 1)

        lines = (workdir / "trace.csv").read_text().strip().splitlines()
        assert len(lines) == trace.shape[0] + 1
        g_last = float(lines[-1].split(",")[1])
        assert g_last == state.G_run

    def test_accumulate_empty_dir_exit_2(self, workdir, capsys):
        empty = workdir / "empty"
        empty.mkdir(exist_ok=True)
        code, _ = run(capsys, "accumulate", empty)
        assert code == cli.EXIT_INPUT_ERROR

    def test_simulate_deterministic_rerun(self, workdir, capsys):
        out1 = workdir / "da"
        out2 = workdir / "db"
        a = run(capsys, "simulate", workdir / "dist.json", "--k", "4",
                "--blocks", "50", "--seed", "3", "--out", out1)
        b = run(capsys, "simulate", workdir / "dist.json", "--k", "4",
                "--blocks", "50", "--seed", "3", "--out", out2)
        assert a[0] == b[0] == 0
        for f1 in sorted(out1.rglob("*")):
            f2 = out2 / f1.relative_to(out1)
            if f1.is_file():
                assert f1.read_bytes() == f2.read_bytes()


class TestReport:
    def test_expansion_report(self, workdir, capsys):
        state = protocol.AccumulatorState(
            G_run=1.7e9,
            N_run=49_977_714,
            bits_consumed=49_977_714 * 19,
            succeeded=True,
            stop_block=49_977_714,
        )
        (workdir / "state.json").write_text(json.dumps(state.to_dict()))
        code, out = run(
            capsys,
            "extract-params",
            "--m-in", "14698652631040", "--sigma-in", "1181264480",
            "--eps-ext", "1.78e-9", "--eps", "5.7e-7",
            "--output", workdir / "ext.json",
        )
        assert code == 0
        code, out = run(
            capsys, "report", workdir / "state.json", workdir / "ext.json", "--k", "17"
        )
        assert code == 0
        obj = json.loads(out)
        assert round(obj["ratio"], 2) == 1.24

    def test_failed_state_exit_1(self, workdir, capsys):
        state = protocol.AccumulatorState(G_run=0.0, N_run=10, bits_consumed=190)
        (workdir / "failed.json").write_text(json.dumps(state.to_dict()))
        code, _ = run(
            capsys, "report", workdir / "failed.json", workdir / "ext.json", "--k", "17"
        )
        assert code == cli.EXIT_PROTOCOL_FAILURE


class TestPlan:
    def test_plan_feasible_toy(self, workdir, capsys, vertices):
        idx = int(np.flatnonzero(~vertices.deterministic_mask)[0])
        from direx.model import ConditionalDistribution

        d = ConditionalDistribution(vertices.vertices[idx].reshape(4, 4))
        (workdir / "toy.json").write_text(d.to_json())
        code, out = run(
            capsys, "plan", workdir / "toy.json",
            "--eps", "1e-3", "--k", "4", "--blocks", "10000000",
        )
        assert code == 0
        obj = json.loads(out)
        assert obj["feasible"] is True
        assert obj["sigma_net"] > 0

    def test_plan_requires_budget_or_blocks(self, workdir, capsys):
        code, _ = run(capsys, "plan", workdir / "dist.json", "--eps", "1e-3")
        assert code == cli.EXIT_INPUT_ERROR


class TestIdempotency:
    def test_same_manifest_hash_on_rerun(self, workdir, capsys):
        _, out1 = run(capsys, "strength", workdir / "dist.json")
        _, out2 = run(capsys, "strength", workdir / "dist.json")
        assert out1 == out2


class TestRunManifest:
    def test_seed_recorded_in_seeded_outputs(self, workdir, capsys):
        code, out = run(
            capsys, "simulate", workdir / "dist.json",
            "--k", "4", "--blocks", "20", "--seed", "9", "--out", workdir / "dm",
        )
        assert code == 0
        assert json.loads(out)["seed"] == 9

    def test_referenced_files_checked_before_execution(self, workdir, capsys):
        code, _ = run(
            capsys, "rate", workdir / "missing_pef.json", workdir / "dist.json"
        )
        assert code == cli.EXIT_INPUT_ERROR

    def test_manifest_excludes_output_destination(self, workdir, capsys):
        _, out1 = run(capsys, "strength", workdir / "dist.json")
        code, _ = run(
            capsys, "strength", workdir / "dist.json",
            "--output", workdir / "s.json",
        )
        assert code == 0
        h1 = json.loads(out1)["manifest_hash"]
        h2 = json.loads((workdir / "s.json").read_text())["manifest_hash"]
        assert h1 == h2
