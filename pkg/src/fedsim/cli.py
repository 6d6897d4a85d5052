"""Federated segmentation challenge simulator: run, rank, eval, synth.

Subcommands::

    fedsim run   --config PATH [--seed N] [--out DIR]
    fedsim rank  --scores PATH --conv PATH [--w FLOAT] [--out PATH] [--per-case PATH]
    fedsim eval  --rs DIR --pm DIR --out PATH
    fedsim synth --out DIR [--seed N] [--checkpoint PATH]

Exit codes: 0 success, 2 bad configuration or arguments, 3 incomplete rank
tables, 4 unmatched cases or regions in ``eval``, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import ranking, synthtask
from .errors import ConfigError, IncompleteTableError
from .metrics import REGIONS, dice, hd95

EXIT_CONFIG = 2
EXIT_INCOMPLETE = 3
EXIT_UNMATCHED = 4

log = logging.getLogger("fedsim")


def _fail(code: int, message: str) -> int:
    print(f"fedsim: error: {message}", file=sys.stderr)
    return code


def cmd_run(args) -> int:
    from .config import load_config
    from .runner import run_config

    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        return _fail(EXIT_CONFIG, f"config file not found: {args.config}")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"invalid config: {exc}")
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        summary = run_config(cfg, args.out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"invalid config: {exc}")
    out = Path(args.out or cfg.output_dir)
    print(f"{summary['rounds_completed']} rounds, S_conv={summary['s_conv']:.1f}, "
          f"held-out mean DSC={summary['holdout_mean_dsc']:.4f} -> {out}")
    return 0


def cmd_rank(args) -> int:
    try:
        table = ranking.read_tables(args.scores, args.conv)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        return _fail(EXIT_CONFIG, f"cannot read tables: {exc}")
    if args.w < 0:
        return _fail(EXIT_CONFIG, "--w must be >= 0")
    try:
        result = ranking.final_scores(table, args.w)
    except IncompleteTableError as exc:
        print("fedsim: error: incomplete rank table; missing cells:", file=sys.stderr)
        for cell in exc.missing:
            print("  " + ",".join(map(str, cell)), file=sys.stderr)
        return EXIT_INCOMPLETE
    if args.per_case:
        ranking.write_per_case_csv(args.per_case, result, table)
    if args.out:
        ranking.write_leaderboard_json(args.out, result)
    else:
        json.dump(result.leaderboard(), sys.stdout, indent=2)
        sys.stdout.write("\n")
    return 0


def cmd_eval(args) -> int:
    rs = synthtask.import_labels(args.rs)
    pm = synthtask.import_labels(args.pm)
    problems = []
    for case in sorted(set(rs) | set(pm)):
        if case not in rs or case not in pm:
            problems.append(f"case {case} only in {'--rs' if case in rs else '--pm'}")
            continue
        for r in REGIONS:
            for side, vols in (("--rs", rs), ("--pm", pm)):
                if r not in vols[case]:
                    problems.append(f"case {case} lacks region {r} in {side}")
    if problems:
        return _fail(EXIT_UNMATCHED, "; ".join(problems))
    if not rs:
        return _fail(EXIT_UNMATCHED, "no label files found")
    rows = []
    for case in sorted(rs):
        for r in REGIONS:
            a, b = rs[case][r], pm[case][r]
            rows.append([case, r, dice(a, b), hd95(a, b)])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["case", "region", "dsc", "hd95"])
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def cmd_synth(args) -> int:
    from .engine import load_checkpoint

    ds = synthtask.generate_dataset(args.seed, args.n_cases, "skewed", args.n_sites)
    ids = ds.holdout_ids if args.holdout_only else None
    synthtask.export_dataset(ds, Path(args.out) / "labels", ids)
    if args.checkpoint:
        ckpt, _ = load_checkpoint(args.checkpoint)
        cases = [ds.cases[c] for c in (ids or sorted(ds.cases))]
        synthtask.export_predictions(ckpt.params, cases, Path(args.out) / "pred")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsim", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.set_defaults(func=cmd_run)

    rank = sub.add_parser("rank", help="rank teams from per-case scores and convergence scores")
    rank.add_argument("--scores", required=True, help="CSV: team,case,region,metric,value")
    rank.add_argument("--conv", required=True, help="CSV: team,conv_score")
    rank.add_argument("--w", type=float, default=ranking.DEFAULT_W)
    rank.add_argument("--out", help="leaderboard JSON (stdout if omitted)")
    rank.add_argument("--per-case", help="per-case rank CSV")
    rank.set_defaults(func=cmd_rank)

    ev = sub.add_parser("eval", help="DSC and HD95 between two label directories")
    ev.add_argument("--rs", required=True, help="reference-standard directory")
    ev.add_argument("--pm", required=True, help="predicted-mask directory")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    syn = sub.add_parser("synth", help="export the synthetic dataset as label files")
    syn.add_argument("--out", required=True)
    syn.add_argument("--seed", type=int, default=42)
    syn.add_argument("--n-cases", type=int, default=100)
    syn.add_argument("--n-sites", type=int, default=10)
    syn.add_argument("--holdout-only", action="store_true")
    syn.add_argument("--checkpoint", help="also write predictions of this checkpoint")
    syn.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
