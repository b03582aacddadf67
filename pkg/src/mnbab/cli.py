"""Command-line entry point.

Subcommands:
  verify  decide one instance (exit 0 verified / 1 falsified / 2 unknown)
  bounds  print root lower bounds per bounding method (ablation axis)
  bench   run a directory of instances and emit a CSV summary

Instances are pairs of JSON files: a network (NAME.net.json) and a
problem (NAME.spec.json); see README for the formats.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bab, oracle
from .config import RunConfig
from .dual_opt import init_param_group, optimize
from .mnc import MncConfig, generate
from .model import NetworkFormatError, load_network, load_spec
from .relax import compute_bounds, BoundContext, LinearExpression, backsubstitute, concretize

EXIT_VERIFIED = 0
EXIT_FALSIFIED = 1
EXIT_UNKNOWN = 2
EXIT_ERROR = 3
EXIT_ORACLE_MISMATCH = 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--branching", choices=["babsr", "acs"], default=None)
    p.add_argument("--cab", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--mnc", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--attack", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--timeout", type=float, default=None, metavar="S")
    p.add_argument("--max-subproblems", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--iters-root", type=int, default=None)
    p.add_argument("--iters-branch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="defaults to MNBAB_THREADS or 1")


def _config_from_args(args) -> RunConfig:
    overrides = {
        "branch_heuristic": args.branching,
        "branch_cab": args.cab,
        "mnc_enabled": args.mnc,
        "attack_enabled": args.attack,
        "timeout": args.timeout,
        "max_subproblems": args.max_subproblems,
        "bab_batch_size": args.batch_size,
        "opt_iters_root": args.iters_root,
        "opt_iters_branch": args.iters_branch,
        "seed": args.seed,
        "threads": args.threads,
    }
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _load_instance(net_path: str, spec_path: str):
    net = load_network(net_path)
    problem = load_spec(spec_path, net)
    return net, problem


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mnbab", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    pv = sub.add_parser("verify", help="verify one instance")
    pv.add_argument("--net", required=True)
    pv.add_argument("--spec", required=True)
    pv.add_argument("--oracle", action="store_true", help="cross-check with the exact oracle")
    pv.add_argument("--trace", metavar="CSV", help="write a per-subproblem trace")
    pv.add_argument("--json", metavar="F", help="write the JSON report")
    _add_config_flags(pv)

    pb = sub.add_parser("bounds", help="print root bounds per bounding method")
    pb.add_argument("--net", required=True)
    pb.add_argument("--spec", required=True)
    pb.add_argument("--json", metavar="F")
    _add_config_flags(pb)

    pn = sub.add_parser("bench", help="run a directory of instances")
    pn.add_argument("--dir", required=True)
    pn.add_argument("--out", metavar="CSV", help="output CSV (default stdout)")
    pn.add_argument("--oracle", action="store_true")
    _add_config_flags(pn)
    return parser


def cmd_verify(args) -> int:
    cfg = _config_from_args(args)
    net, problem = _load_instance(args.net, args.spec)
    trace_rows = [] if args.trace else None
    report = bab.verify(problem, cfg, trace=trace_rows)

    oracle_status = None
    if args.oracle:
        status, _, _ = oracle.exact_verdict(problem)
        oracle_status = status

    doc = report.to_dict()
    doc["net"] = args.net
    doc["spec"] = args.spec
    doc["config"] = cfg.to_dict()
    if oracle_status is not None:
        doc["oracle_status"] = oracle_status
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2))
    if args.trace:
        _write_trace(args.trace, trace_rows)

    print(
        f"{report.status}  bound={doc['global_lower_bound']}  "
        f"subproblems={report.subproblems_visited}  time={report.wall_time:.3f}s"
    )
    if report.witness is not None:
        print(f"witness: {[float(v) for v in report.witness]}")
    if oracle_status is not None:
        print(f"oracle: {oracle_status}")
        if report.status != "unknown" and oracle_status != report.status:
            print("MISMATCH between verifier and oracle", file=sys.stderr)
            return EXIT_ORACLE_MISMATCH
    return {
        "verified": EXIT_VERIFIED,
        "falsified": EXIT_FALSIFIED,
        "unknown": EXIT_UNKNOWN,
    }[report.status]


def _write_trace(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            fh.write("")
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def root_bounds_by_method(problem, cfg: RunConfig) -> dict:
    """Lower bounds on every property row at the root, per method."""
    net = problem.encoded_network()
    out = {}
    for method in ("interval", "backsub"):
        bounds = compute_bounds(net, problem, method=method)
        ctx = BoundContext(bounds=bounds, side="lower")
        expr0, _ = backsubstitute(LinearExpression.identity(net.output_dim), net.output_frames(), ctx)
        vals, _ = concretize(expr0, problem, "lower")
        out["interval" if method == "interval" else "deeppoly"] = vals.tolist()
        if method == "backsub":
            root_bounds = bounds
    for label, use_mnc in (("alpha", False), ("alpha+mnc", True)):
        mnc_view = None
        if use_mnc:
            mnc_set = generate(
                net, problem, root_bounds,
                MncConfig(True, cfg.mnc_max_pairs_per_layer, cfg.mnc_max_facets_per_pair),
            )
            mnc_view = mnc_set.engine_view() if mnc_set.total() else None
        vals = []
        for r in range(net.output_dim):
            a = np.zeros((1, net.output_dim))
            a[0, r] = 1.0
            params = init_param_group(root_bounds, None, mnc_view)
            res = optimize(
                net, problem, None, mnc_view, params, root_bounds,
                cfg.opt_iters_root, lr_alpha=cfg.opt_lr_alpha,
                lr_beta=cfg.opt_lr_beta, lr_gamma=cfg.opt_lr_gamma,
                expr=LinearExpression(a, np.zeros(1)), early_exit=False,
            )
            vals.append(res.bound)
        out[label] = vals
    return out


def cmd_bounds(args) -> int:
    cfg = _config_from_args(args)
    net, problem = _load_instance(args.net, args.spec)
    table = root_bounds_by_method(problem, cfg)
    for method, vals in table.items():
        print(f"{method:10s} " + "  ".join(f"{v: .6f}" for v in vals))
    if args.json:
        Path(args.json).write_text(json.dumps({"schema_version": 1, "bounds": table}, indent=2))
    return EXIT_VERIFIED


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    base = Path(args.dir)
    nets = sorted(base.glob("*.net.json"))
    if not nets:
        print(f"no *.net.json instances under {base}", file=sys.stderr)
        return EXIT_ERROR
    fields = ["instance", "verdict", "bound", "subproblems", "time"]
    if args.oracle:
        fields += ["oracle_verdict", "match"]
    rows = []
    for net_path in nets:
        name = net_path.name[: -len(".net.json")]
        spec_path = net_path.with_name(name + ".spec.json")
        net, problem = _load_instance(str(net_path), str(spec_path))
        report = bab.verify(problem, cfg)
        row = {
            "instance": name,
            "verdict": report.status,
            "bound": _fmt(report.global_lower_bound),
            "subproblems": report.subproblems_visited,
            "time": f"{report.wall_time:.3f}",
        }
        if args.oracle:
            status, _, _ = oracle.exact_verdict(problem)
            row["oracle_verdict"] = status
            row["match"] = str(report.status == status).lower()
        rows.append(row)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return EXIT_VERIFIED


def _fmt(v) -> str:
    if v in (np.inf, -np.inf):
        return str(v)
    return f"{float(v):.9g}"


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.cmd == "verify":
            return cmd_verify(args)
        if args.cmd == "bounds":
            return cmd_bounds(args)
        return cmd_bench(args)
    except (NetworkFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
