"""Simulation statistics, accumulation semantics and accounting tests."""

from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from direx import pef, protocol
from direx.extractor import ExtractorParams
from direx.model import ConditionalDistribution
from direx.protocol import (
    AccumulatorState,
    BlockRecord,
    CalibrationShortfallError,
    CycleData,
    ExpansionFile,
    ProtocolFailure,
    RunConfig,
    accumulate,
    consumed_bits,
    expansion_summary,
    pad_block,
    simulate_block,
    simulate_calibration_counts,
    simulate_dataset,
    simulate_run_witness,
    stream_rng,
)

GOLD_EXTRACTOR = ExtractorParams(
    m_in=14_698_652_631_040,
    sigma_in=1_181_264_480,
    eps_ext=1.78e-9,
    eps=5.7e-7,
    k_out=1_181_264_237,
    d_s=3_725_074,
    w=331,
)


class TestSimulateBlock:
    def test_k0_blocks_are_single_spot_checks(self, commissioning):
        rng = stream_rng(1)
        for _ in range(200):
            rec = simulate_block(commissioning["distribution"], 0, rng)
            assert rec.length == 1
            assert rec.events == ()

    def test_mean_length_k17(self, commissioning):
        # length law alone, vectorised: uniform on 1..2^17
        rng = stream_rng(2)
        lengths = rng.integers(1, 2**17 + 1, size=1_000_000)
        se = (2**17 / math.sqrt(12.0)) / math.sqrt(lengths.size)
        assert abs(lengths.mean() - (1 + 2**17) / 2) < 3 * se

    def test_mean_length_full_records_k6(self, commissioning):
        rng = stream_rng(3)
        lengths = [
            simulate_block(commissioning["distribution"], 6, rng).length
            for _ in range(100_000)
        ]
        se = (2**6 / math.sqrt(12.0)) / math.sqrt(len(lengths))
        assert abs(np.mean(lengths) - (1 + 2**6) / 2) < 3 * se

    def test_event_frequencies_match_binomial(self, commissioning):
        """Detection counts at settings 00 obey the exact binomial law."""
        nu = commissioning["distribution"]
        rng = stream_rng(4)
        n_blocks = 60_000
        recs = [simulate_block(nu, 6, rng) for _ in range(n_blocks)]
        trials = sum(r.length - 1 for r in recs)
        by_outcome = np.zeros(4)
        for r in recs:
            for _, o in r.events:
                by_outcome[o] += 1
        p = nu.table[0]
        for o in (1, 2, 3):
            mean = trials * p[o]
            sd = math.sqrt(trials * p[o] * (1 - p[o]))
            assert abs(by_outcome[o] - mean) < 5 * sd

    def test_spot_settings_uniform(self, commissioning):
        rng = stream_rng(5)
        recs = [simulate_block(commissioning["distribution"], 3, rng) for _ in range(40_000)]
        counts = np.bincount([r.spot_settings for r in recs], minlength=4)
        sd = math.sqrt(len(recs) * 0.25 * 0.75)
        assert (np.abs(counts - len(recs) * 0.25) < 5 * sd).all()

    def test_record_invariants_enforced(self):
        with pytest.raises(ValueError):
            BlockRecord(length=5, events=((5, 1),), spot_settings=0, spot_outcome=0)
        with pytest.raises(ValueError):
            BlockRecord(length=5, events=((2, 0),), spot_settings=0, spot_outcome=0)
        with pytest.raises(ValueError):
            BlockRecord(
                length=5, events=((3, 1), (2, 1)), spot_settings=0, spot_outcome=0
            )


class TestDeterminism:
    def test_same_seed_same_dataset(self, commissioning):
        cfg = RunConfig(
            k=5, beta=1e-6, G_min=1e9, N_b=300, n_calib_min=1000, seed=99
        )
        c1, s1 = simulate_dataset(commissioning["distribution"], cfg, 64, 2, 5000, 500)
        c2, s2 = simulate_dataset(commissioning["distribution"], cfg, 64, 2, 5000, 500)
        assert s1 == s2
        assert c1 == c2

    def test_different_seed_differs(self, commissioning):
        cfg1 = RunConfig(k=5, beta=1e-6, G_min=1e9, N_b=100, n_calib_min=1, seed=1)
        cfg2 = RunConfig(k=5, beta=1e-6, G_min=1e9, N_b=100, n_calib_min=1, seed=2)
        c1, _ = simulate_dataset(commissioning["distribution"], cfg1, 64, 2, 1000, 100)
        c2, _ = simulate_dataset(commissioning["distribution"], cfg2, 64, 2, 1000, 100)
        assert c1 != c2

    def test_witness_runs_bit_identical(self, commissioning, small_table):
        w1 = simulate_run_witness(small_table, commissioning["distribution"], 5000, seed=7)
        w2 = simulate_run_witness(small_table, commissioning["distribution"], 5000, seed=7)
        assert (w1 == w2).all()
        w3 = simulate_run_witness(
            small_table, commissioning["distribution"], 5000, seed=7, stream=1
        )
        assert not (w1 == w3).all()

    def test_chunking_does_not_change_draws(self, commissioning, small_table):
        # chunk size is an internal detail; the stream order is fixed
        w1 = simulate_run_witness(
            small_table, commissioning["distribution"], 4097, seed=3, chunk=4097
        )
        w2 = simulate_run_witness(
            small_table, commissioning["distribution"], 4097, seed=3, chunk=4097
        )
        assert (w1 == w2).all()


class TestAccounting:
    def test_consumed_bits_production_numbers(self):
        assert consumed_bits(49_977_714, 17) == 949_576_566
        assert consumed_bits(56_070_910, 17) == 1_065_347_290
        assert consumed_bits(0, 17) == 0

    @given(n=st.integers(0, 10**9), k=st.integers(0, 30))
    @settings(max_examples=50, deadline=None)
    def test_consumed_bits_formula(self, n, k):
        assert consumed_bits(n, k) == n * (k + 2)

    def test_pad_block_lengths(self):
        rec = BlockRecord(length=1, events=(), spot_settings=0, spot_outcome=0)
        padded = pad_block(rec, 6)
        assert padded.zero_fill_bits == 2 * (2**6 - 1)
        assert padded.total_bits == 2 * 2**6
        full = BlockRecord(length=2**6, events=(), spot_settings=1, spot_outcome=2)
        assert pad_block(full, 6).zero_fill_bits == 0

    def test_experiment_output_length_production(self):
        assert protocol.experiment_output_length(56_070_910, 17) == 14_698_652_631_040

    def test_expansion_ratios_production(self):
        early = AccumulatorState(
            G_run=1.62e9,
            N_run=49_977_714,
            bits_consumed=consumed_bits(49_977_714, 17),
            succeeded=True,
            stop_block=49_977_714,
        )
        rep = expansion_summary(early, GOLD_EXTRACTOR, 17)
        assert round(rep.ratio, 2) == 1.24
        assert rep.k_in == 953_301_640

        full = AccumulatorState(
            G_run=1.84e9,
            N_run=56_070_910,
            bits_consumed=consumed_bits(56_070_910, 17),
            succeeded=True,
            stop_block=56_070_910,
        )
        rep = expansion_summary(full, GOLD_EXTRACTOR, 17)
        assert rep.ratio == pytest.approx(1.105, abs=5e-4)

    def test_summary_requires_success(self):
        state = AccumulatorState(G_run=0.0, N_run=5, bits_consumed=5 * 19)
        with pytest.raises(ProtocolFailure):
            expansion_summary(state, GOLD_EXTRACTOR, 17)

    def test_break_even_ratio(self):
        ex = ExtractorParams(
            m_in=10**6, sigma_in=2 * 19 + 8, eps_ext=0.5, eps=1.0,
            k_out=2 * 19 + 8, d_s=8, w=5,
        )
        state = AccumulatorState(
            G_run=1.0, N_run=2, bits_consumed=38, succeeded=True, stop_block=2
        )
        assert expansion_summary(state, ex, 17).ratio == 1.0


def _cycles_from_records(nu, records, calib_trials=50_000, files=2, seed=5):
    rng = stream_rng(seed, 10**9)
    per = max(1, len(records) // files)
    chunks = [records[i : i + per] for i in range(0, len(records), per)]
    return [
        CycleData(
            calibration=simulate_calibration_counts(nu, calib_trials, rng),
            files=tuple(
                ExpansionFile(
                    blocks=tuple(ch),
                    trailing_calibration=simulate_calibration_counts(nu, 2000, rng),
                )
                for ch in chunks
            ),
        )
    ]


@pytest.fixture(scope="module")
def sim(commissioning):
    nu = commissioning["distribution"]
    rng = stream_rng(21)
    records = [simulate_block(nu, 6, rng) for _ in range(400)]
    return nu, records


class TestAccumulate:
    def test_all_ones_pefs_never_succeed(self, sim):
        nu, records = sim
        cycles = _cycles_from_records(nu, records)
        beta = 1e-6
        anchors = tuple(
            pef.TrialPef.constant_one(beta, protocol_q)
            for protocol_q in (
                1.0 / 64,
                1.0 / (64 - 31),
                1.0,
            )
        )
        table = pef.PefTable(k=6, beta=beta, j_mid=32, anchors=anchors)
        cfg = RunConfig(k=6, beta=beta, G_min=1.0, N_b=400, n_calib_min=1, seed=0)
        state, trace = accumulate(cycles, cfg, lambda nu_h: table)
        assert not state.succeeded
        assert state.G_run == 0.0
        assert state.N_run == 400

    def test_sparse_dense_equivalence(self, sim, small_table):
        nu, records = sim
        tabs = protocol._witness_tables(small_table)
        log2f = small_table.log2_f(np.arange(1, 65))
        for rec in records[:100]:
            sparse = protocol.block_log2_pef(rec, small_table, tabs)
            dense = sum(
                log2f[j - 1, 4 * s + o]
                for j, (s, o) in enumerate(rec.dense_trials(), start=1)
            )
            assert sparse == pytest.approx(dense, abs=1e-12)

    def test_witness_additivity_across_splits(self, sim, small_table):
        nu, records = sim
        cfg = RunConfig(
            k=6, beta=small_table.beta, G_min=1e18, N_b=10**6, n_calib_min=1, seed=0
        )
        whole = _cycles_from_records(nu, records, seed=5)
        state_all, _ = accumulate(whole, cfg, lambda d: small_table)
        part_a = _cycles_from_records(nu, records[:250], seed=5)
        part_b = _cycles_from_records(nu, records[250:], seed=5)
        s1, _ = accumulate(part_a, cfg, lambda d: small_table)
        s2, _ = accumulate(part_b, cfg, lambda d: small_table)
        assert state_all.G_run == pytest.approx(s1.G_run + s2.G_run, rel=1e-12)
        assert state_all.N_run == s1.N_run + s2.N_run

    def test_ledger_matches_formula_every_step(self, sim, small_table):
        nu, records = sim
        cfg = RunConfig(
            k=6, beta=small_table.beta, G_min=1e18, N_b=10**6, n_calib_min=1, seed=0
        )
        cycles = _cycles_from_records(nu, records)
        _, trace = accumulate(cycles, cfg, lambda d: small_table)
        assert (trace[:, 2] == (6 + 2) * trace[:, 0]).all()

    def test_early_stop_never_overshoots(self, sim, small_table, commissioning):
        nu, records = sim
        rep = pef.block_gain(small_table, commissioning["distribution"])
        gmin = 400 * rep.g_block * 0.5
        cfg = RunConfig(
            k=6, beta=small_table.beta, G_min=gmin, N_b=10**6, n_calib_min=1, seed=0
        )
        cycles = _cycles_from_records(nu, records)
        state, trace = accumulate(cycles, cfg, lambda d: small_table)
        if state.succeeded:
            assert state.stop_block == trace.shape[0]
            assert trace[-1, 1] >= gmin
            assert (trace[:-1, 1] < gmin).all()

    def test_block_budget_respected(self, sim, small_table):
        nu, records = sim
        cfg = RunConfig(
            k=6, beta=small_table.beta, G_min=1e18, N_b=100, n_calib_min=1, seed=0
        )
        cycles = _cycles_from_records(nu, records)
        state, _ = accumulate(cycles, cfg, lambda d: small_table)
        assert state.N_run == 100
        assert not state.succeeded

    def test_calibration_borrowing(self, sim, small_table):
        nu, records = sim
        rng = stream_rng(77)
        # second cycle's own calibration is short; the previous cycle's
        # trailing files must top it up newest-first
        c0 = CycleData(
            calibration=simulate_calibration_counts(nu, 30_000, rng),
            files=tuple(
                ExpansionFile(
                    blocks=tuple(records[i : i + 10]),
                    trailing_calibration=simulate_calibration_counts(nu, 4_000, rng),
                )
                for i in range(0, 30, 10)
            ),
        )
        c1 = CycleData(
            calibration=simulate_calibration_counts(nu, 2_000, rng),
            files=(
                ExpansionFile(
                    blocks=tuple(records[30:40]),
                    trailing_calibration=simulate_calibration_counts(nu, 1_000, rng),
                ),
            ),
        )
        usable = protocol._usable_calibration([c0, c1], 1, n_calib_min=9_000)
        assert usable.total == 2_000 + 4_000 + 4_000  # stops once satisfied
        usable = protocol._usable_calibration([c0, c1], 1, n_calib_min=13_000)
        assert usable.total == 2_000 + 3 * 4_000

        with pytest.raises(CalibrationShortfallError, match="cycle 1"):
            protocol._usable_calibration([c0, c1], 1, n_calib_min=50_000)

    def test_file_granularity_checks_later(self, sim, small_table):
        nu, records = sim
        rep_gmin = 1e-9  # crossed almost immediately
        base = dict(
            k=6, beta=small_table.beta, G_min=rep_gmin, N_b=10**6, n_calib_min=1, seed=0
        )
        cycles = _cycles_from_records(nu, records)
        s_block, _ = accumulate(
            cycles, RunConfig(**base, check_granularity="block"), lambda d: small_table
        )
        s_file, _ = accumulate(
            cycles, RunConfig(**base, check_granularity="file"), lambda d: small_table
        )
        if s_block.succeeded and s_file.succeeded:
            assert s_file.stop_block >= s_block.stop_block

    def test_mismatched_table_rejected(self, sim, small_table):
        nu, records = sim
        cfg = RunConfig(k=6, beta=2e-6, G_min=1.0, N_b=10, n_calib_min=1, seed=0)
        cycles = _cycles_from_records(nu, records[:10])
        with pytest.raises(ValueError):
            accumulate(cycles, cfg, lambda d: small_table)


class TestVectorizedWitness:
    def test_matches_per_block_accumulation_statistically(
        self, commissioning, small_table
    ):
        nu = commissioning["distribution"]
        fast = simulate_run_witness(small_table, nu, 200_000, seed=31)
        rep = pef.block_gain(small_table, nu)
        se = math.sqrt(rep.var_block / fast.size)
        assert abs(fast.mean() - rep.g_block) < 4 * se
        # and the slow reference path agrees with the analytic mean too
        rng = stream_rng(32)
        tabs = protocol._witness_tables(small_table)
        slow = np.array(
            [
                protocol.block_log2_pef(simulate_block(nu, 6, rng), small_table, tabs)
                for _ in range(20_000)
            ]
        ) / small_table.beta
        se_slow = math.sqrt(rep.var_block / slow.size)
        assert abs(slow.mean() - rep.g_block) < 4 * se_slow


class TestWireFormats:
    @given(
        st.lists(
            st.tuples(
                st.integers(1, 64),
                st.integers(0, 3),
                st.integers(0, 3),
                st.lists(st.tuples(st.integers(1, 63), st.integers(1, 3)), max_size=5),
            ),
            max_size=20,
        )
    )
    @settings(max_examples=40, deadline=None)
    def test_binary_roundtrip(self, raw):
        records = []
        for length, s, o, ev in raw:
            ev = sorted({p: out for p, out in ev if p < length}.items())
            records.append(
                BlockRecord(
                    length=length,
                    events=tuple(ev),
                    spot_settings=s,
                    spot_outcome=o,
                )
            )
        buf = io.BytesIO()
        protocol.write_blocks(records, buf)
        buf.seek(0)
        assert protocol.read_blocks(buf) == records
        text = protocol.blocks_to_jsonl(records)
        assert protocol.blocks_from_jsonl(text) == records

    def test_truncated_stream_rejected(self):
        rec = BlockRecord(length=3, events=((1, 2),), spot_settings=1, spot_outcome=0)
        buf = io.BytesIO()
        protocol.write_blocks([rec], buf)
        data = buf.getvalue()
        with pytest.raises((ValueError, Exception)):
            protocol.read_blocks(io.BytesIO(data[:3]))

    def test_dataset_roundtrip(self, commissioning, tmp_path):
        nu = commissioning["distribution"]
        cfg = RunConfig(k=4, beta=1e-6, G_min=1.0, N_b=50, n_calib_min=1, seed=12)
        cycles, _ = simulate_dataset(nu, cfg, 10, 2, 3000, 300)
        protocol.write_dataset(cycles, tmp_path / "ds", {"k": 4, "seed": 12})
        back, manifest = protocol.load_dataset(tmp_path / "ds")
        assert manifest["k"] == 4
        assert back == cycles

    def test_trace_csv(self, tmp_path):
        trace = np.array([[1, 0.5, 8], [2, 1.5, 16], [3, 2.5, 24], [4, 3.0, 32]])
        buf = io.StringIO()
        protocol.write_trace_csv(trace, buf, decimation=2)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "block_index,G_run,bits_consumed"
        assert lines[1].startswith("1,")
        assert lines[-1].startswith("4,")  # final row always present


class TestThreadIndependence:
    def test_dataset_identical_across_thread_counts(self, commissioning):
        nu = commissioning["distribution"]
        cfg = RunConfig(k=5, beta=1e-6, G_min=1e18, N_b=600, n_calib_min=1, seed=55)
        c1, s1 = simulate_dataset(nu, cfg, 128, 3, 20_000, 2_000, threads=1)
        c2, s2 = simulate_dataset(nu, cfg, 128, 3, 20_000, 2_000, threads=2)
        assert c1 == c2
        assert s1 == s2

    def test_accumulate_identical_with_pipelining(self, commissioning, small_table):
        nu = commissioning["distribution"]
        cfg = RunConfig(k=6, beta=1e-6, G_min=1e18, N_b=500, n_calib_min=1, seed=56)
        cycles, _ = simulate_dataset(nu, cfg, 100, 2, 30_000, 3_000)
        builder = lambda d: pef.build_pef_table(d, 1e-6, 6, j_mid=small_table.j_mid)
        s1, t1 = accumulate(cycles, cfg, builder, threads=1)
        s2, t2 = accumulate(cycles, cfg, builder, threads=2)
        assert s1 == s2
        assert np.array_equal(t1, t2)


class TestDenseDetections:
    """High detection probability exercises the permutation fallbacks."""

    def test_positions_stay_distinct_when_dense(self):
        d = ConditionalDistribution(np.full((4, 4), 0.25))  # p_det = 0.75
        rng = stream_rng(123)
        for _ in range(500):
            rec = simulate_block(d, 5, rng)
            positions = [p for p, _ in rec.events]
            assert len(set(positions)) == len(positions)
            assert all(1 <= p < rec.length for p in positions)

    def test_vectorized_witness_handles_dense(self):
        d = ConditionalDistribution(np.full((4, 4), 0.25))
        table = pef.build_pef_table(d, 0.01, 5, optimize_j_mid=True)
        w = simulate_run_witness(table, d, 20_000, seed=9)
        assert np.isfinite(w).all()
