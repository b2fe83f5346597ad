"""Command-line front end wiring the analysis pipeline.

Subcommands mirror the library: ``fit``, ``strength``, ``pef-opt``,
``rate``, ``plan``, ``simulate``, ``accumulate``, ``extract-params`` and
``report``.  All numeric output is deterministic given the seed; every JSON
result carries a hash of the fully resolved inputs so reruns can be checked
for identity.

Exit codes: 0 success, 1 protocol failure (the accumulated witness did not
reach the threshold), 2 malformed input or unusable parameters.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from direx import extractor as ext
from direx import model, pef, planner, protocol

EXIT_OK = 0
EXIT_PROTOCOL_FAILURE = 1
EXIT_INPUT_ERROR = 2


class InputError(Exception):
    """Bad file or parameter; reported with exit code 2."""


@dataclass(frozen=True)
class RunManifest:
    """Resolved description of one command invocation.

    Captures the command, its logical parameters (output destinations are
    excluded, so reruns that only change where results land hash the same),
    the input files and the seed when the command consumes one.  Every
    referenced file must exist before execution.
    """

    command: str
    params: dict
    files: tuple[Path, ...]
    seed: int | None = None

    @classmethod
    def resolve(cls, command: str, args, files: list[Path]) -> "RunManifest":
        skip = {"func", "output", "out", "trace", "command"}
        params = {
            k: str(v)
            for k, v in vars(args).items()
            if k not in skip and not callable(v)
        }
        for p in files:
            if not p.exists():
                raise InputError(f"input file not found: {p}")
        return cls(
            command=command,
            params=params,
            files=tuple(files),
            seed=getattr(args, "seed", None),
        )

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.command.encode())
        h.update(json.dumps(self.params, sort_keys=True).encode())
        for p in self.files:
            h.update(p.name.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
        return h.hexdigest()[:16]

    def stamp(self, obj: dict) -> dict:
        """Attach the hash (and seed, when present) to an output object."""
        obj["manifest_hash"] = self.hash()
        if self.seed is not None:
            obj["seed"] = self.seed
        return obj



def _emit(obj: dict, args) -> None:
    out = json.dumps(obj, indent=1) if args.format == "json" else _as_csv(obj)
    if getattr(args, "output", None):
        Path(args.output).write_text(out + "\n")
    else:
        print(out)


def _as_csv(obj: dict) -> str:
    flat = {k: v for k, v in obj.items() if not isinstance(v, (dict, list))}
    head = ",".join(flat)
    vals = ",".join(str(v) for v in flat.values())
    return head + "\n" + vals


def _load_counts(path: str) -> model.CountsTable:
    p = Path(path)
    if not p.exists():
        raise InputError(f"counts file not found: {path}")
    text = p.read_text()
    try:
        if p.suffix.lower() == ".csv":
            return model.CountsTable.from_csv(text)
        return model.CountsTable.from_json(text)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise InputError(f"{path}: {e}") from e


def _load_distribution(path: str) -> model.ConditionalDistribution:
    p = Path(path)
    if not p.exists():
        raise InputError(f"distribution file not found: {path}")
    text = p.read_text()
    try:
        if p.suffix.lower() == ".csv":
            return model.ConditionalDistribution.from_csv(text)
        return model.ConditionalDistribution.from_json(text)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise InputError(f"{path}: {e}") from e


# --- subcommand implementations --------------------------------------------


def cmd_fit(args) -> int:
    counts = _load_counts(args.counts)
    dist = model.fit_mle(counts)
    if args.format == "csv":
        out = dist.to_csv()
        if args.output:
            Path(args.output).write_text(out)
        else:
            print(out, end="")
        return EXIT_OK
    obj = json.loads(dist.to_json())
    obj["log_likelihood"] = model.log_likelihood(counts, dist)
    RunManifest.resolve("fit", args, [Path(args.counts)]).stamp(obj)
    _emit(obj, args)
    return EXIT_OK


def cmd_strength(args) -> int:
    dist = _load_distribution(args.distribution)
    s = model.statistical_strength(dist)
    manifest = RunManifest.resolve("strength", args, [Path(args.distribution)])
    _emit(manifest.stamp({"statistical_strength_bits": s}), args)
    return EXIT_OK


def cmd_pef_opt(args) -> int:
    dist = _load_distribution(args.distribution)
    table = pef.build_pef_table(
        dist,
        args.beta,
        args.k,
        j_mid=args.j_mid,
        optimize_j_mid=args.optimize_j_mid,
    )
    obj = json.loads(table.to_json())
    RunManifest.resolve("pef-opt", args, [Path(args.distribution)]).stamp(obj)
    _emit(obj, args)
    return EXIT_OK


def cmd_rate(args) -> int:
    table = pef.PefTable.from_json(Path(args.pef).read_text())
    dist = _load_distribution(args.distribution)
    rep = pef.block_gain(table, dist)
    obj = json.loads(rep.to_json())
    RunManifest.resolve(
        "rate", args, [Path(args.pef), Path(args.distribution)]
    ).stamp(obj)
    _emit(obj, args)
    return EXIT_OK


def cmd_plan(args) -> int:
    dist = _load_distribution(args.distribution)
    files = [Path(args.distribution)]
    if args.k_range:
        lo, hi = (int(v) for v in args.k_range.split(":"))
        rows = []
        best = None
        curves: dict[int, planner.GainCurve] = {}
        for k in range(lo, hi + 1):
            try:
                plan = planner.min_blocks(dist, k, args.eps, curve=curves.setdefault(
                    k, planner.GainCurve(dist, k)))
                rows.append((k, plan))
                if best is None or plan.N_t_min < best.N_t_min:
                    best = plan
            except planner.InfeasiblePlan:
                rows.append((k, None))
        if best is None:
            raise InputError("no feasible block length in the requested range")
        best.k_opt = best.k
        print(f"{'k':>3} {'N_b_min':>14} {'N_t_min':>12} {'beta_opt':>11} {'eps_en_opt':>11}")
        for k, plan in rows:
            if plan is None:
                print(f"{k:>3} {'infeasible':>14}")
            else:
                print(
                    f"{k:>3} {plan.N_b_min:>14,} {plan.N_t_min:>12.4g} "
                    f"{plan.beta_opt:>11.4g} {plan.eps_en_opt:>11.4g}"
                )
        print(f"optimal block length exponent: k = {best.k_opt}")
        obj = best.to_dict()
    else:
        if args.blocks:
            n_b = args.blocks
        elif args.budget:
            n_b = int(args.budget / ((1 + 2**args.k) / 2))
        else:
            raise InputError("plan needs --blocks or --budget")
        feasible, plan = planner.expansion_feasible(dist, n_b, args.k, args.eps)
        obj = plan.to_dict()
    obj.pop("evaluations", None)
    RunManifest.resolve("plan", args, files).stamp(obj)
    _emit(obj, args)
    return EXIT_OK


def cmd_simulate(args) -> int:
    dist = _load_distribution(args.distribution)
    cfg = protocol.RunConfig(
        k=args.k,
        beta=args.beta or 1e-7,
        G_min=args.gmin or 0.0,
        N_b=args.blocks,
        n_calib_min=args.calib_trials,
        seed=args.seed,
        deadtime_trials=args.deadtime,
    )
    cycles, summary = protocol.simulate_dataset(
        dist,
        cfg,
        blocks_per_file=args.blocks_per_file,
        files_per_cycle=args.files_per_cycle,
        calib_trials=args.calib_trials,
        trailing_calib_trials=args.trailing_calib_trials,
        threads=args.threads or 1,
    )
    manifest = RunManifest.resolve("simulate", args, [Path(args.distribution)])
    meta = manifest.stamp(
        {
            "k": args.k,
            "n_blocks": summary["n_blocks"],
            "distribution": str(args.distribution),
        }
    )
    protocol.write_dataset(cycles, args.out, meta)
    summary["out"] = str(args.out)
    _emit(manifest.stamp(summary), args)
    return EXIT_OK


def cmd_accumulate(args) -> int:
    root = Path(args.data)
    if not root.is_dir() or not (root / "manifest.json").exists():
        raise InputError(f"not a dataset directory: {args.data}")
    cycles, manifest = protocol.load_dataset(root)
    if not cycles or not any(c.blocks for c in cycles):
        raise InputError(f"dataset at {args.data} contains no blocks")
    k = args.k if args.k is not None else int(manifest["k"])
    if args.gmin is None or args.beta is None:
        raise InputError("accumulate needs --beta and --gmin")
    cfg = protocol.RunConfig(
        k=k,
        beta=args.beta,
        G_min=args.gmin,
        N_b=args.blocks or sum(len(c.blocks) for c in cycles),
        n_calib_min=args.n_calib_min,
        seed=args.seed,
        check_granularity=args.check_granularity,
    )

    j_mid_holder: dict = {"j_mid": args.j_mid}

    def builder(nu_h):
        if j_mid_holder["j_mid"] is None and k != 17:
            table = pef.build_pef_table(nu_h, cfg.beta, k, optimize_j_mid=True)
            j_mid_holder["j_mid"] = table.j_mid
            return table
        return pef.build_pef_table(nu_h, cfg.beta, k, j_mid=j_mid_holder["j_mid"])

    state, trace = protocol.accumulate(cycles, cfg, builder, threads=args.threads or 1)
    obj = state.to_dict()
    RunManifest.resolve("accumulate", args, [root / "manifest.json"]).stamp(obj)
    if args.trace:
        with open(args.trace, "w") as fh:
            protocol.write_trace_csv(trace, fh, decimation=args.trace_decimation)
        obj["trace"] = str(args.trace)
    _emit(obj, args)
    return EXIT_OK if state.succeeded else EXIT_PROTOCOL_FAILURE


def cmd_extract_params(args) -> int:
    try:
        params = ext.ExtractorParams.budget(
            args.m_in, args.sigma_in, args.eps_ext, args.eps
        )
    except ext.InfeasibleParameters as e:
        raise InputError(str(e)) from e
    obj = json.loads(params.to_json())
    obj["slacks"] = params.constraint_slacks()
    obj["in_set_X"] = (
        ext.check_set_X(params, args.beta) if args.beta is not None else None
    )
    RunManifest.resolve("extract-params", args, []).stamp(obj)
    _emit(obj, args)
    return EXIT_OK


def cmd_report(args) -> int:
    state_obj = json.loads(Path(args.state).read_text())
    state = protocol.AccumulatorState(
        G_run=state_obj["G_run"],
        N_run=state_obj["N_run"],
        bits_consumed=state_obj["bits_consumed"],
        succeeded=state_obj["succeeded"],
        stop_block=state_obj.get("stop_block"),
    )
    params = ext.ExtractorParams.from_json(Path(args.extractor).read_text())
    try:
        rep = protocol.expansion_summary(state, params, args.k)
    except protocol.ProtocolFailure as e:
        print(str(e), file=sys.stderr)
        return EXIT_PROTOCOL_FAILURE
    obj = json.loads(rep.to_json())
    RunManifest.resolve(
        "report", args, [Path(args.state), Path(args.extractor)]
    ).stamp(obj)
    _emit(obj, args)
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="direx",
        description="Spot-checked device-independent randomness expansion toolkit",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--output", help="write the result here instead of stdout")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_parser("fit", help="maximum-likelihood distribution from counts")
    p.add_argument("counts")
    p.set_defaults(func=cmd_fit)

    p = add_parser("strength", help="statistical strength of a distribution")
    p.add_argument("distribution")
    p.set_defaults(func=cmd_strength)

    p = add_parser("pef-opt", help="optimise a per-block PEF table")
    p.add_argument("distribution")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--j-mid", type=int, default=None)
    p.add_argument("--optimize-j-mid", action="store_true")
    p.set_defaults(func=cmd_pef_opt)

    p = add_parser("rate", help="block rate and variance of a PEF table")
    p.add_argument("pef")
    p.add_argument("distribution")
    p.set_defaults(func=cmd_rate)

    p = add_parser("plan", help="expansion feasibility and design tables")
    p.add_argument("distribution")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--k", type=int, default=17)
    p.add_argument("--blocks", type=int)
    p.add_argument("--budget", type=float, help="trial budget instead of --blocks")
    p.add_argument("--k-range", help="sweep k, e.g. 15:19")
    p.set_defaults(func=cmd_plan)

    p = add_parser("simulate", help="simulate an honest dataset to disk")
    p.add_argument("distribution")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--gmin", type=float)
    p.add_argument("--blocks-per-file", type=int, default=1024)
    p.add_argument("--files-per-cycle", type=int, default=4)
    p.add_argument("--calib-trials", type=int, default=100_000)
    p.add_argument("--trailing-calib-trials", type=int, default=10_000)
    p.add_argument("--deadtime", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count())
    p.set_defaults(func=cmd_simulate)

    p = add_parser("accumulate", help="run the witness accumulation analysis")
    p.add_argument("data")
    p.add_argument("--beta", type=float)
    p.add_argument("--gmin", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--n-calib-min", type=int, default=1)
    p.add_argument("--j-mid", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check-granularity", choices=("block", "file"), default="block")
    p.add_argument("--trace", help="write the witness trace CSV here")
    p.add_argument("--trace-decimation", type=int, default=1)
    p.add_argument("--threads", type=int, default=os.cpu_count())
    p.set_defaults(func=cmd_accumulate)

    p = add_parser("extract-params", help="extractor seed/output budget")
    p.add_argument("--m-in", type=int, required=True)
    p.add_argument("--sigma-in", type=float, required=True)
    p.add_argument("--eps-ext", type=float, required=True)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_extract_params)

    p = add_parser("report", help="expansion accounting of a finished run")
    p.add_argument("state", help="accumulator state JSON")
    p.add_argument("extractor", help="extractor params JSON")
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=cmd_report)

    return ap


def main(argv: list[str] | None = None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (
        ValueError,
        KeyError,
        OSError,
        json.JSONDecodeError,
        model.MleConvergenceError,
        pef.PefOptimizationError,
        planner.InfeasiblePlan,
        protocol.CalibrationShortfallError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
