"""Branch-and-bound driver: subproblem queue, batched bounding,
termination and verdict reporting.

Each property row is verified by its own best-first run over subproblems
(split assignments with cached intermediate bounds).  A popped
subproblem is bounded by the dual optimizer; bounds > 0 prune, primal
upper bounds < 0 falsify (witnesses are re-verified concretely and lift
to the root problem), everything else is split in two.  Fully split
subproblems are affine over their subdomain and are resolved exactly by
the enumeration oracle when the instance is within its guard.
"""

from __future__ import annotations

import heapq
import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from . import branch as branching
from . import falsify, oracle
from .config import RunConfig
from .dual_opt import init_param_group, optimize, warm_start_group, OptResult
from .mnc import MncConfig, MncSet, generate
from .model import Network, VerificationProblem
from .relax import InfeasibleSubproblemError, LinearExpression, compute_bounds


@dataclass
class Subproblem:
    """One node of the search: split assignment, cached intermediate
    bounds with staleness flags, best known lower bound, warm-start
    parameters and depth (= number of set split entries)."""

    splits: Dict[int, np.ndarray]
    bounds: Dict[int, Tuple[np.ndarray, np.ndarray]]
    stale: Set[int]
    bound: float
    warm: Optional[dict]
    depth: int


@dataclass
class VerdictReport:
    status: str  # verified | falsified | unknown
    witness: Optional[np.ndarray]
    global_lower_bound: float
    subproblems_visited: int
    wall_time: float
    phase_times: Dict[str, float]
    rows: List[dict] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "status": self.status,
            "witness": None if self.witness is None else [float(v) for v in self.witness],
            "global_lower_bound": _jsonf(self.global_lower_bound),
            "subproblems_visited": self.subproblems_visited,
            "wall_time_s": self.wall_time,
            "phase_times_s": {k: round(v, 6) for k, v in self.phase_times.items()},
            "rows": [dict(r, lower_bound=_jsonf(r["lower_bound"])) for r in self.rows],
            "seed": self.seed,
        }


def _jsonf(v: float):
    if v == np.inf:
        return "inf"
    if v == -np.inf:
        return "-inf"
    return float(v)


def pop_batch(queue: list, batch_size: int) -> List[Subproblem]:
    """Up to batch_size subproblems, worst (smallest) bound first."""
    out = []
    while queue and len(out) < batch_size:
        out.append(heapq.heappop(queue)[2])
    return out


def verify(
    problem: VerificationProblem,
    config: Optional[RunConfig] = None,
    trace: Optional[list] = None,
) -> VerdictReport:
    """Run the falsifier, then per-row branch-and-bound; see VerdictReport."""
    cfg = config or RunConfig()
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    deadline = t0 + cfg.timeout
    phases: Dict[str, float] = {}

    net = problem.encoded_network()

    t = time.perf_counter()
    if cfg.attack_enabled:
        w = falsify.pgd_attack(problem, cfg, rng)
        phases["attack"] = time.perf_counter() - t
        if w is not None:
            return VerdictReport(
                "falsified", w, float(net.forward(w).min()), 0,
                time.perf_counter() - t0, phases, [], cfg.seed,
            )
    else:
        phases["attack"] = 0.0

    t = time.perf_counter()
    root_bounds = compute_bounds(net, problem, method=cfg.intermediate_method)
    phases["root_bounds"] = time.perf_counter() - t

    t = time.perf_counter()
    mnc_set: Optional[MncSet] = None
    mnc_view = None
    if cfg.mnc_enabled:
        mnc_set = generate(
            net, problem, root_bounds,
            MncConfig(True, cfg.mnc_max_pairs_per_layer, cfg.mnc_max_facets_per_pair),
        )
        if mnc_set.total() > 0:
            mnc_view = mnc_set.engine_view()
    phases["mnc"] = time.perf_counter() - t

    cost_model = branching.SplitCostModel.build(net, mnc_set)
    margins = net.forward(problem.x0)
    order = np.argsort(margins, kind="stable")
    if cfg.row_order == "easiest_first":
        order = order[::-1]

    t = time.perf_counter()
    status = "verified"
    witness = None
    total_visited = 0
    global_lb = np.inf
    row_reports: List[dict] = []
    for r in order:
        rr = _verify_row(
            net, problem, int(r), root_bounds, mnc_set, mnc_view,
            cost_model, cfg, deadline, cfg.max_subproblems - total_visited, trace,
        )
        total_visited += rr["subproblems"]
        row_reports.append(rr)
        global_lb = min(global_lb, rr["lower_bound"])
        if rr["status"] == "falsified":
            status = "falsified"
            witness = np.array(rr["witness"])
            break
        if rr["status"] == "unknown":
            status = "unknown"
            break
    phases["bab"] = time.perf_counter() - t

    return VerdictReport(
        status, witness, global_lb, total_visited,
        time.perf_counter() - t0, phases, row_reports, cfg.seed,
    )


def _verify_row(
    net: Network,
    problem: VerificationProblem,
    row: int,
    root_bounds,
    mnc_set,
    mnc_view,
    cost_model,
    cfg: RunConfig,
    deadline: float,
    budget: int,
    trace: Optional[list],
) -> dict:
    expr_a = np.zeros((1, net.output_dim))
    expr_a[0, row] = 1.0
    expr = LinearExpression(expr_a, np.zeros(1))

    queue: list = []
    counter = itertools.count()
    root = Subproblem({}, dict(root_bounds), set(), -np.inf, None, 0)
    heapq.heappush(queue, (root.bound, next(counter), root))

    visited = 0
    resolved_min = np.inf
    status = None
    witness = None

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        while queue:
            if time.perf_counter() > deadline or visited >= budget:
                status = "unknown"
                break
            batch = pop_batch(queue, cfg.bab_batch_size)

            def job(sub: Subproblem):
                return _bound_subproblem(net, problem, expr, sub, mnc_view, cfg)

            results = list(pool.map(job, batch)) if pool else [job(s) for s in batch]

            for sub, res in zip(batch, results):
                visited += 1
                bound_before = sub.bound
                if res is None:  # contradictory splits: empty subdomain
                    _trace(trace, row, sub, bound_before, np.inf, None, "infeasible", queue, visited)
                    continue
                sub.bound = res.bound
                if res.primal < 0.0:
                    x = res.primal_x
                    if problem.contains(x) and float(net.forward(x).min()) <= 0.0:
                        status, witness = "falsified", x
                        _trace(trace, row, sub, bound_before, res.bound, None, "falsified", queue, visited)
                        break
                if res.bound > 0.0:
                    resolved_min = min(resolved_min, res.bound)
                    _trace(trace, row, sub, bound_before, res.bound, None, "pruned", queue, visited)
                    continue
                outcome = _branch_or_resolve(
                    net, problem, expr, row, sub, res, mnc_set, mnc_view,
                    cost_model, cfg, queue, counter,
                )
                if outcome is not None:
                    kind, payload = outcome
                    if kind == "pruned":
                        resolved_min = min(resolved_min, payload)
                        _trace(trace, row, sub, bound_before, payload, None, "pruned-exact", queue, visited)
                        continue
                    if kind == "falsified":
                        status, witness = "falsified", payload
                        _trace(trace, row, sub, bound_before, res.bound, None, "falsified-exact", queue, visited)
                        break
                    status = "unknown"
                    _trace(trace, row, sub, bound_before, res.bound, None, "stuck", queue, visited)
                    break
                _trace(trace, row, sub, bound_before, res.bound, None, "branched", queue, visited)
            if status is not None:
                break
    finally:
        if pool:
            pool.shutdown(wait=False)

    queue_min = min((item[0] for item in queue), default=np.inf)
    lb = min(resolved_min, queue_min)
    if status is None:
        status = "verified"
    return {
        "row": row,
        "status": status,
        "witness": None if witness is None else [float(v) for v in witness],
        "lower_bound": lb,
        "subproblems": visited,
    }


def _bound_subproblem(net, problem, expr, sub: Subproblem, mnc_view, cfg) -> Optional[OptResult]:
    """Refresh stale intermediate bounds, then optimize the objective
    bound; None signals an empty subdomain."""
    try:
        if sub.stale:
            sub.bounds = compute_bounds(
                net, problem, splits=sub.splits,
                method=cfg.intermediate_method, cache=sub.bounds, stale=sub.stale,
            )
            sub.stale = set()
    except InfeasibleSubproblemError:
        return None
    if sub.warm is None:
        params = init_param_group(sub.bounds, sub.splits, mnc_view)
    else:
        params = warm_start_group(sub.warm, sub.bounds, sub.splits, mnc_view)
    iters = cfg.opt_iters_root if sub.depth == 0 else cfg.opt_iters_branch
    return optimize(
        net, problem, sub.splits, mnc_view, params, sub.bounds, iters,
        lr_alpha=cfg.opt_lr_alpha, lr_beta=cfg.opt_lr_beta, lr_gamma=cfg.opt_lr_gamma,
        expr=expr,
    )


def _branch_or_resolve(
    net, problem, expr, row, sub, res: OptResult, mnc_set, mnc_view,
    cost_model, cfg, queue, counter,
):
    """Split the subproblem; when it is fully split, resolve it exactly
    instead (the network is affine over the subdomain).  Returns None
    after a successful branch, else ('pruned', bound), ('falsified',
    witness) or ('unknown', None)."""
    scores = None
    if cfg.branch_heuristic == "acs":
        scores = branching.acs_score(res.params, mnc_set, sub.bounds, sub.splits)
        if sum(float(s.sum()) for s in scores.values()) == 0.0:
            scores = None
    if scores is None:
        scores = branching.babsr_score(res.a_prime, sub.bounds, sub.splits)
    try:
        decision = branching.decide(
            scores, sub.bounds, sub.splits, cost_model, cab=cfg.branch_cab
        )
    except branching.NoSplitCandidateError:
        return _resolve_fully_split(net, problem, expr, row, sub, res, mnc_view, cfg)

    for s_value in (-1, 1):
        child = branching.apply_split(sub, decision, s_value)
        child.warm = res.params
        child.bound = res.bound
        heapq.heappush(queue, (child.bound, next(counter), child))
    return None


def _resolve_fully_split(net, problem, expr, row, sub, res: OptResult, mnc_view, cfg):
    if (
        cfg.fully_split_exact
        and problem.p == np.inf
        and problem.network.input_dim <= oracle.MAX_INPUT_DIM
    ):
        try:
            ores = oracle.exact_min(problem.network, problem, forced=sub.splits)
        except oracle.OracleGuardError:
            ores = None
        if ores is not None:
            m = float(ores.mins[row])
            if m > 0.0:
                return "pruned", m
            x = ores.witnesses[row]
            if problem.contains(x) and float(net.forward(x).min()) <= 0.0:
                return "falsified", x
            return "unknown", None

    # No exact route: squeeze the dual until the subproblem decides.
    long = optimize(
        net, problem, sub.splits, mnc_view, res.params, sub.bounds,
        cfg.fully_split_iters,
        lr_alpha=cfg.opt_lr_alpha, lr_beta=cfg.opt_lr_beta, lr_gamma=cfg.opt_lr_gamma,
        expr=expr,
    )
    if long.bound > 0.0:
        return "pruned", long.bound
    if long.primal < 0.0:
        x = long.primal_x
        if problem.contains(x) and float(net.forward(x).min()) <= 0.0:
            return "falsified", x
    return "unknown", None


def _trace(trace, row, sub, bound_before, bound_after, decision, status, queue, visited):
    if trace is None:
        return
    queue_min = min((item[0] for item in queue), default=np.inf)
    trace.append(
        {
            "seq": visited,
            "row": row,
            "depth": sub.depth,
            "bound_before": bound_before,
            "bound_after": bound_after,
            "status": status,
            "queue_size": len(queue),
            "queue_min": queue_min,
        }
    )
