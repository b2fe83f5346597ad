"""Spot-checked block protocol: simulation, accumulation, accounting.

A block is a run of trials whose length ``L`` is uniform on ``1..2^k``; all
trials before the last use the fixed settings 00 and the final spot-check
trial draws its settings uniformly.  Records are sparse: non-spot trials
with no detections (outcome 00) are implicit, only detection events and the
spot trial are stored.

The analysis consumes blocks in time order.  Each cycle of data provides
calibration counts from which the honest-device distribution is refitted
and the per-position PEF table rebuilt (at fixed power and middle anchor);
every block then adds ``sum_j log2 F_j(c_j z_j) / beta`` to the running
entropy witness until the success threshold is reached.

Randomness budget: each block costs ``k`` bits for its length and 2 bits
for the spot-check settings.  Counter-based generators keyed by
``(seed, stream)`` make simulated datasets and witness traces bit-exact
reproducible regardless of how work is sharded.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from direx.model import ConditionalDistribution, CountsTable, fit_mle
from direx.pef import PefTable

__all__ = [
    "BlockRecord",
    "RunConfig",
    "AccumulatorState",
    "ExpansionFile",
    "CycleData",
    "PaddedBlock",
    "ExpansionReport",
    "CalibrationShortfallError",
    "ProtocolFailure",
    "stream_rng",
    "simulate_block",
    "simulate_calibration_counts",
    "simulate_dataset",
    "simulate_run_witness",
    "accumulate",
    "consumed_bits",
    "pad_block",
    "expansion_summary",
    "write_blocks",
    "read_blocks",
    "blocks_to_jsonl",
    "blocks_from_jsonl",
    "write_dataset",
    "load_dataset",
    "write_trace_csv",
]

_LN2 = math.log(2.0)

BITS_PER_SPOT_CHECK = 2


class CalibrationShortfallError(RuntimeError):
    """A cycle cannot assemble the minimum number of calibration trials."""


class ProtocolFailure(RuntimeError):
    """Raised when an operation requires a successful run."""


def stream_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for an independent, reproducible stream."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), stream]))


@dataclass(frozen=True)
class BlockRecord:
    """Sparse record of one block.

    ``events`` lists ``(position, outcome)`` for pre-spot trials with a
    detection (outcome index != 0), positions strictly increasing in
    ``1..length-1``; every other pre-spot trial implicitly has settings 00
    and outcome 00.  The spot-check trial sits at ``position == length``.
    """

    length: int
    events: tuple[tuple[int, int], ...]
    spot_settings: int
    spot_outcome: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("block length must be at least 1")
        if not 0 <= self.spot_settings <= 3 or not 0 <= self.spot_outcome <= 3:
            raise ValueError("spot settings/outcome must be pair indices 0..3")
        last = 0
        for pos, out in self.events:
            if not last < pos < self.length:
                raise ValueError(
                    f"event position {pos} not strictly increasing below {self.length}"
                )
            if not 1 <= out <= 3:
                raise ValueError("recorded events must have a detection outcome")
            last = pos

    def dense_trials(self) -> list[tuple[int, int]]:
        """All trials as (settings, outcome) pairs, including implicit ones."""
        by_pos = dict(self.events)
        out = [(0, by_pos.get(j, 0)) for j in range(1, self.length)]
        out.append((self.spot_settings, self.spot_outcome))
        return out


@dataclass(frozen=True)
class RunConfig:
    """Protocol parameters fixed before a run."""

    k: int
    beta: float
    G_min: float
    N_b: int
    n_calib_min: int
    seed: int
    deadtime_trials: int = 0
    check_granularity: str = "block"  # or "file"

    def __post_init__(self):
        if self.k < 0 or self.beta <= 0 or self.N_b <= 0 or self.n_calib_min < 0:
            raise ValueError("k, beta, N_b must be positive; n_calib_min nonnegative")
        if self.deadtime_trials < 0:
            raise ValueError("deadtime_trials must be nonnegative")
        if self.check_granularity not in ("block", "file"):
            raise ValueError("check_granularity must be 'block' or 'file'")

    @property
    def t_min_log2(self) -> float:
        """log2 of the PEF-product success threshold, beta * G_min."""
        return self.beta * self.G_min


@dataclass
class AccumulatorState:
    """Running totals of an accumulation pass."""

    G_run: float = 0.0
    N_run: int = 0
    bits_consumed: int = 0
    succeeded: bool = False
    stop_block: int | None = None

    def to_dict(self) -> dict:
        return {
            "G_run": self.G_run,
            "N_run": self.N_run,
            "bits_consumed": self.bits_consumed,
            "succeeded": self.succeeded,
            "stop_block": self.stop_block,
        }


@dataclass(frozen=True)
class ExpansionFile:
    blocks: tuple[BlockRecord, ...]
    trailing_calibration: CountsTable


@dataclass(frozen=True)
class CycleData:
    """One acquisition cycle: leading calibration, then expansion files."""

    calibration: CountsTable
    files: tuple[ExpansionFile, ...]

    @property
    def blocks(self) -> tuple[BlockRecord, ...]:
        return tuple(b for f in self.files for b in f.blocks)


def consumed_bits(N_run: int, k: int) -> int:
    """Input randomness spent on block lengths and spot-check settings."""
    if N_run < 0:
        raise ValueError("N_run must be nonnegative")
    return N_run * (k + BITS_PER_SPOT_CHECK)


@dataclass(frozen=True)
class PaddedBlock:
    """Fixed-length output descriptor: the record plus lazy zero fill."""

    record: BlockRecord
    zero_fill_bits: int
    total_bits: int


def pad_block(record: BlockRecord, k: int) -> PaddedBlock:
    """Zero-padding descriptor taking a block to its fixed output length.

    Every real trial contributes 2 outcome bits; the padded length is
    ``2 * 2^k`` bits per block, so the experiment output is
    ``m_in = N_b * 2^k * 2`` bits regardless of realised block lengths.
    """
    if record.length > 2**k:
        raise ValueError(f"block of length {record.length} exceeds 2^{k}")
    total = 2 * 2**k
    return PaddedBlock(
        record=record,
        zero_fill_bits=2 * (2**k - record.length),
        total_bits=total,
    )


def experiment_output_length(N_b: int, k: int) -> int:
    """Padded output length m_in of a full run, in bits."""
    return N_b * 2**k * 2


@dataclass(frozen=True)
class ExpansionReport:
    """Input/output accounting of a successful run."""

    k_out: int
    bits_consumed: int
    seed_bits: int
    k_in: int
    ratio: float
    net_bits: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def expansion_summary(state: AccumulatorState, extractor, k: int) -> ExpansionReport:
    """Expansion ratio achieved by a successful accumulation.

    ``k_in`` counts the ``(k+2)`` bits per processed block plus the
    extractor seed; ``ratio = k_out / k_in``.
    """
    if not state.succeeded:
        raise ProtocolFailure("expansion summary requires a successful run")
    consumed = consumed_bits(state.N_run, k)
    if consumed != state.bits_consumed:
        raise ValueError("state ledger disagrees with (k+2) * N_run")
    k_in = consumed + extractor.d_s
    return ExpansionReport(
        k_out=extractor.k_out,
        bits_consumed=consumed,
        seed_bits=extractor.d_s,
        k_in=k_in,
        ratio=extractor.k_out / k_in,
        net_bits=extractor.k_out - k_in,
    )


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def simulate_block(
    nu_h: ConditionalDistribution, k: int, rng: np.random.Generator
) -> BlockRecord:
    """Draw one honest block.

    The block length is uniform on ``1..2^k``; pre-spot trials are i.i.d.
    with outcome law ``nu_h(.|00)`` (drawn sparsely: a binomial detection
    count, positions without replacement, detection outcomes from the
    renormalised law, which is equivalent to the trial-by-trial draw); the
    spot trial uses uniform settings.
    """
    n = 2**k
    length = int(rng.integers(1, n + 1))
    p00 = nu_h.table[0]
    p_det = float(1.0 - p00[0])
    events: list[tuple[int, int]] = []
    if length > 1 and p_det > 0:
        m = int(rng.binomial(length - 1, p_det))
        if m:
            if 2 * m <= length - 1:
                # distinct uniform positions by rejection: cheaper than a
                # permutation when detections are sparse, and exactly uniform
                while True:
                    positions = rng.integers(1, length, size=m)
                    if np.unique(positions).size == m:
                        break
            else:
                positions = rng.permutation(length - 1)[:m] + 1
            positions = np.sort(positions)
            cdf = np.cumsum(p00[1:] / p_det)
            outs = 1 + np.searchsorted(cdf, rng.random(m))
            events = [(int(p), int(o)) for p, o in zip(positions, outs)]
    s = int(rng.integers(0, 4))
    o = int(rng.choice(4, p=nu_h.table[s]))
    return BlockRecord(
        length=length, events=tuple(events), spot_settings=s, spot_outcome=o
    )


def simulate_calibration_counts(
    nu_h: ConditionalDistribution, n_trials: int, rng: np.random.Generator
) -> CountsTable:
    """Counts of calibration trials with uniform settings."""
    joint = (nu_h.table / 4.0).ravel()
    draw = rng.multinomial(n_trials, joint)
    return CountsTable(draw.reshape(4, 4))


def _simulate_block_range(
    table: np.ndarray, k: int, seed: int, start: int, stop: int
) -> list[BlockRecord]:
    """Blocks ``start..stop-1`` on their per-index streams (pool worker)."""
    nu_h = ConditionalDistribution(table)
    return [simulate_block(nu_h, k, stream_rng(seed, i)) for i in range(start, stop)]


def simulate_dataset(
    nu_h: ConditionalDistribution,
    cfg: RunConfig,
    blocks_per_file: int,
    files_per_cycle: int,
    calib_trials: int,
    trailing_calib_trials: int,
    threads: int = 1,
) -> tuple[list[CycleData], dict]:
    """Materialise an honest dataset in the cycle/file layout.

    Blocks are drawn on per-block streams keyed by ``(seed, block index)``,
    so the dataset is bit-identical no matter how the work is sharded;
    ``threads > 1`` simulates block ranges on a process pool.  Calibration
    counts get their own stream namespace.  Returns the cycles and a
    wall-clock summary that includes dead-time trials (skipped after each
    spot check, never recorded or analysed).
    """
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        shard = max(256, cfg.N_b // (4 * threads) + 1)
        ranges = [
            (i, min(i + shard, cfg.N_b)) for i in range(0, cfg.N_b, shard)
        ]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(
                _simulate_block_range,
                [np.asarray(nu_h.table)] * len(ranges),
                [cfg.k] * len(ranges),
                [cfg.seed] * len(ranges),
                [a for a, _ in ranges],
                [b for _, b in ranges],
            )
            records = [rec for part in parts for rec in part]
    else:
        records = _simulate_block_range(
            np.asarray(nu_h.table), cfg.k, cfg.seed, 0, cfg.N_b
        )

    cycles: list[CycleData] = []
    n_blocks = 0
    calib_stream = 1 << 48  # separate stream namespace from blocks
    while n_blocks < cfg.N_b:
        calib = simulate_calibration_counts(
            nu_h, calib_trials, stream_rng(cfg.seed, calib_stream)
        )
        calib_stream += 1
        files = []
        for _ in range(files_per_cycle):
            blocks = records[n_blocks : n_blocks + blocks_per_file]
            if not blocks:
                break
            n_blocks += len(blocks)
            trail = simulate_calibration_counts(
                nu_h, trailing_calib_trials, stream_rng(cfg.seed, calib_stream)
            )
            calib_stream += 1
            files.append(
                ExpansionFile(blocks=tuple(blocks), trailing_calibration=trail)
            )
            if n_blocks >= cfg.N_b:
                break
        cycles.append(CycleData(calibration=calib, files=tuple(files)))
    trials_recorded = sum(r.length for r in records)
    summary = {
        "n_blocks": n_blocks,
        "trials_recorded": trials_recorded,
        "deadtime_trials": cfg.deadtime_trials * n_blocks,
        "trials_wall_clock": trials_recorded + cfg.deadtime_trials * n_blocks,
        "bits_consumed": consumed_bits(n_blocks, cfg.k),
    }
    return cycles, summary


def _witness_tables(table: PefTable):
    """Prefix sums and lookups for fast witness evaluation.

    Returns ``(prefix00, delta, log2f)`` where ``prefix00[l]`` is
    ``sum_{j<=l} log2 F_j(00,00)``, ``delta[j-1, o]`` the correction for a
    detection with outcome ``o`` at position ``j`` (settings 00), and
    ``log2f`` the full per-position table for spot lookups.
    """
    log2f = table.log2_f(np.arange(1, table.n_positions + 1))
    base00 = log2f[:, 0]
    prefix00 = np.concatenate(([0.0], np.cumsum(base00)))
    delta = log2f[:, :4] - base00[:, None]
    return prefix00, delta, log2f


def block_log2_pef(record: BlockRecord, table: PefTable, tables=None) -> float:
    """log2 of the block PEF product, from the sparse record."""
    prefix00, delta, log2f = tables if tables is not None else _witness_tables(table)
    total = prefix00[record.length - 1]
    for pos, out in record.events:
        total += delta[pos - 1, out]
    total += log2f[record.length - 1, 4 * record.spot_settings + record.spot_outcome]
    return float(total)


def simulate_run_witness(
    table: PefTable,
    nu_h: ConditionalDistribution,
    n_blocks: int,
    seed: int,
    stream: int = 0,
    chunk: int = 1 << 14,
) -> np.ndarray:
    """Per-block witness increments of one honest run, vectorised.

    Returns ``log2 G_i / beta`` for ``n_blocks`` simulated blocks on the
    ``(seed, stream)`` generator.  Statistically identical to accumulating
    :func:`simulate_block` records one by one, but fast enough for
    million-block completeness studies.
    """
    rng = stream_rng(seed, stream)
    n = table.n_positions
    prefix00, delta, log2f = _witness_tables(table)
    p00 = nu_h.table[0]
    p_det = float(1.0 - p00[0])
    det_out_cdf = np.cumsum(p00[1:] / p_det) if p_det > 0 else np.ones(3)
    spot_cdf = np.cumsum(nu_h.table, axis=1)

    out = np.empty(n_blocks)
    done = 0
    while done < n_blocks:
        m = min(chunk, n_blocks - done)
        L = rng.integers(1, n + 1, size=m)
        totals = prefix00[L - 1].copy()
        if p_det > 0:
            counts = rng.binomial(L - 1, p_det)
            total_e = int(counts.sum())
            if total_e:
                boe = np.repeat(np.arange(m), counts)  # block of event
                span = (L - 1)[boe]
                pos = (rng.random(total_e) * span).astype(np.int64) + 1
                # enforce distinct positions inside a block by redrawing
                for _ in range(64):
                    order = np.lexsort((pos, boe))
                    sb, sp = boe[order], pos[order]
                    dup = (sb[1:] == sb[:-1]) & (sp[1:] == sp[:-1])
                    if not dup.any():
                        break
                    bad_blocks = np.unique(sb[1:][dup])
                    redo = np.isin(boe, bad_blocks)
                    pos[redo] = (rng.random(int(redo.sum())) * span[redo]).astype(
                        np.int64
                    ) + 1
                else:
                    # dense detections: settle stragglers exactly, per block
                    order = np.lexsort((pos, boe))
                    sb, sp = boe[order], pos[order]
                    dup = (sb[1:] == sb[:-1]) & (sp[1:] == sp[:-1])
                    for b in np.unique(sb[1:][dup]):
                        sel = boe == b
                        n_b = int(sel.sum())
                        pos[sel] = rng.permutation(int(L[b]) - 1)[:n_b] + 1
                outs = 1 + np.searchsorted(det_out_cdf, rng.random(total_e))
                np.add.at(totals, boe, delta[pos - 1, outs])
        s = rng.integers(0, 4, size=m)
        u = rng.random(m)
        o = (u[:, None] > spot_cdf[s]).sum(axis=1)
        totals += log2f[L - 1, 4 * s + o]
        out[done : done + m] = totals
        done += m
    return out / table.beta


# ---------------------------------------------------------------------------
# accumulation (the analysis pass)
# ---------------------------------------------------------------------------


def _usable_calibration(
    cycles: Sequence[CycleData], index: int, n_calib_min: int
) -> CountsTable:
    """Calibration counts for a cycle, borrowing from the previous cycle.

    When the cycle's own calibration file is short, trailing calibration
    from the previous cycle's expansion files is added, last file first,
    until the minimum is reached.
    """
    counts = cycles[index].calibration.counts.copy()
    total = int(counts.sum())
    if total < n_calib_min and index > 0:
        for f in reversed(cycles[index - 1].files):
            if total >= n_calib_min:
                break
            counts = counts + f.trailing_calibration.counts
            total = int(counts.sum())
    if total < n_calib_min:
        raise CalibrationShortfallError(
            f"cycle {index}: only {total} calibration trials available, "
            f"need {n_calib_min}"
        )
    return CountsTable(counts)


def accumulate(
    cycles: Sequence[CycleData],
    cfg: RunConfig,
    pef_builder: Callable[[ConditionalDistribution], PefTable],
    stop_on_success: bool = True,
    threads: int = 1,
) -> tuple[AccumulatorState, np.ndarray]:
    """Run the analysis pass over cycles of recorded data.

    Per cycle, the honest-device distribution is refitted from the usable
    calibration counts and ``pef_builder`` turns it into the per-position
    table (the power must match ``cfg.beta``).  Blocks then update the
    running witness; the threshold test runs per block or per file
    according to ``cfg.check_granularity``.  Returns the final state and
    the witness trace, one row ``(block_index, G_run, bits_consumed)`` per
    block.

    Witness updates always commit in block order; ``threads > 1`` only
    pipelines the next cycle's calibration fit and table build alongside
    the current cycle's block processing.
    """
    state = AccumulatorState()
    rows: list[tuple[int, float, int]] = []
    per_file = cfg.check_granularity == "file"
    budget_left = True

    def fit_cycle(ci: int) -> PefTable:
        calib = _usable_calibration(cycles, ci, cfg.n_calib_min)
        return pef_builder(fit_mle(calib))

    pool = None
    pending = None
    if threads > 1 and len(cycles) > 1:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(max_workers=max(1, threads - 1))
    try:
        for ci in range(len(cycles)):
            if not budget_left:
                break
            table = pending.result() if pending is not None else fit_cycle(ci)
            pending = (
                pool.submit(fit_cycle, ci + 1)
                if pool is not None and ci + 1 < len(cycles)
                else None
            )
            if table.k != cfg.k or not math.isclose(table.beta, cfg.beta):
                raise ValueError("PEF table does not match the run configuration")
            tabs = _witness_tables(table)
            for f in cycles[ci].files:
                for rec in f.blocks:
                    state.N_run += 1
                    state.bits_consumed += cfg.k + BITS_PER_SPOT_CHECK
                    state.G_run += block_log2_pef(rec, table, tabs) / cfg.beta
                    rows.append((state.N_run, state.G_run, state.bits_consumed))
                    if (
                        not per_file
                        and not state.succeeded
                        and state.G_run >= cfg.G_min
                    ):
                        state.succeeded = True
                        state.stop_block = state.N_run
                        if stop_on_success:
                            return state, np.array(rows)
                    if state.N_run >= cfg.N_b:
                        budget_left = False
                        break
                if per_file and not state.succeeded and state.G_run >= cfg.G_min:
                    state.succeeded = True
                    state.stop_block = state.N_run
                    if stop_on_success:
                        return state, np.array(rows)
                if not budget_left:
                    break
    finally:
        if pool is not None:
            pool.shutdown(wait=False, cancel_futures=True)
    return state, (np.array(rows) if rows else np.empty((0, 3)))


# ---------------------------------------------------------------------------
# wire formats
# ---------------------------------------------------------------------------

_BLOCK_HEAD = struct.Struct("<IH")
_EVENT = struct.Struct("<IB")
_SPOT = struct.Struct("<BB")


def write_blocks(records: Iterable[BlockRecord], fh) -> int:
    """Binary little-endian block stream; returns the number written."""
    n = 0
    for rec in records:
        fh.write(_BLOCK_HEAD.pack(rec.length, len(rec.events)))
        for pos, out in rec.events:
            fh.write(_EVENT.pack(pos, out))
        fh.write(_SPOT.pack(rec.spot_settings, rec.spot_outcome))
        n += 1
    return n


def read_blocks(fh) -> list[BlockRecord]:
    out = []
    while True:
        head = fh.read(_BLOCK_HEAD.size)
        if not head:
            break
        if len(head) < _BLOCK_HEAD.size:
            raise ValueError("truncated block stream")
        length, n_ev = _BLOCK_HEAD.unpack(head)
        events = []
        for _ in range(n_ev):
            pos, outcome = _EVENT.unpack(fh.read(_EVENT.size))
            events.append((pos, outcome))
        s, o = _SPOT.unpack(fh.read(_SPOT.size))
        out.append(
            BlockRecord(
                length=length, events=tuple(events), spot_settings=s, spot_outcome=o
            )
        )
    return out


def blocks_to_jsonl(records: Iterable[BlockRecord]) -> str:
    """Debug-friendly JSON-lines form of a block stream."""
    lines = []
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "l": rec.length,
                    "events": [[p, o] for p, o in rec.events],
                    "spot": [rec.spot_settings, rec.spot_outcome],
                }
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def blocks_from_jsonl(text: str) -> list[BlockRecord]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        o = json.loads(line)
        out.append(
            BlockRecord(
                length=int(o["l"]),
                events=tuple((int(p), int(v)) for p, v in o["events"]),
                spot_settings=int(o["spot"][0]),
                spot_outcome=int(o["spot"][1]),
            )
        )
    return out


def write_dataset(cycles: Sequence[CycleData], path: str | Path, meta: dict) -> None:
    """Write cycles to a directory tree the accumulator can read back."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(meta, indent=1))
    for ci, cyc in enumerate(cycles):
        cdir = root / f"cycle_{ci:04d}"
        cdir.mkdir(exist_ok=True)
        (cdir / "calibration.json").write_text(cyc.calibration.to_json())
        for fi, f in enumerate(cyc.files):
            with open(cdir / f"expansion_{fi:04d}.blocks", "wb") as fh:
                write_blocks(f.blocks, fh)
            (cdir / f"expansion_{fi:04d}.calib.json").write_text(
                f.trailing_calibration.to_json()
            )


def load_dataset(path: str | Path) -> tuple[list[CycleData], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cycles = []
    for cdir in sorted(root.glob("cycle_*")):
        calib = CountsTable.from_json((cdir / "calibration.json").read_text())
        files = []
        for bpath in sorted(cdir.glob("expansion_*.blocks")):
            with open(bpath, "rb") as fh:
                blocks = read_blocks(fh)
            calib_path = bpath.with_suffix("").with_suffix(".calib.json")
            trailing = CountsTable.from_json(calib_path.read_text())
            files.append(
                ExpansionFile(blocks=tuple(blocks), trailing_calibration=trailing)
            )
        cycles.append(CycleData(calibration=calib, files=tuple(files)))
    return cycles, manifest


def write_trace_csv(trace: np.ndarray, fh, decimation: int = 1) -> None:
    """Witness trace as CSV rows (block_index, G_run, bits_consumed)."""
    fh.write("block_index,G_run,bits_consumed\n")
    n = trace.shape[0]
    for i in range(0, n, max(decimation, 1)):
        bi, g, bits = trace[i]
        fh.write(f"{int(bi)},{float(g)!r},{int(bits)}\n")
    if n and (n - 1) % max(decimation, 1) != 0:
        bi, g, bits = trace[-1]
        fh.write(f"{int(bi)},{float(g)!r},{int(bits)}\n")
