"""Acceptance gate: one test per criterion, each printing a pass/fail
line (run with -s to see them).  Tolerances are pinned here and nowhere
else."""

import itertools
import time

import numpy as np

from mnbab.bab import verify
from mnbab.branch import SplitCostModel, decide
from mnbab.config import RunConfig
from mnbab.dual_opt import bound_and_gradient, init_param_group, optimize
from mnbab.mnc import MncConfig, generate
from mnbab.model import Affine, Network, ReLU, VerificationProblem
from mnbab.oracle import exact_min, exact_verdict
from mnbab.relax import (
    BoundContext,
    LinearExpression,
    bound_query,
    compute_bounds,
    concretize,
    primal_upper_bound,
)

from instances import correlated_instance, tiny_instance
from reference import DeepPolyReference, random_mlp, random_problem, sample_region


def _report(name: str, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# -- 1. oracle completeness ---------------------------------------------------


def test_c01_oracle_completeness():
    t0 = time.perf_counter()
    cfg = RunConfig(timeout=120.0, max_subproblems=100_000)
    made = mismatches = 0
    seed = 0
    while made < 50 and seed < 200:
        prob = tiny_instance(seed)
        seed += 1
        if prob is None:
            continue
        made += 1
        status, _, _ = exact_verdict(prob)
        rep = verify(prob, cfg)
        if rep.status != status:
            mismatches += 1
    wall = time.perf_counter() - t0
    ok = made == 50 and mismatches == 0 and wall < 600.0
    _report(
        "C01 oracle-completeness",
        ok,
        f"{made - mismatches}/{made} verdicts match the exact oracle in {wall:.1f}s (< 600s)",
    )


# -- 2. soundness fuzzing ------------------------------------------------------


def _random_valid_params(rng, bounds, splits, mnc_view):
    params = init_param_group(bounds, splits, mnc_view)
    for pset in params.values():
        if pset.alpha.size:
            pset.alpha = rng.uniform(0.0, 1.0, pset.alpha.size)
        if pset.beta.size:
            pset.beta = rng.uniform(0.0, 1.0, pset.beta.size)
        if pset.gamma.size:
            pset.gamma = rng.uniform(0.0, 0.8, pset.gamma.size)
    return params


def test_c02_soundness_fuzzing():
    rng = np.random.default_rng(77)
    checked = 0
    trial = -1
    while checked < 200 and trial < 400:
        trial += 1
        g = np.random.default_rng(5000 + trial)
        d = int(g.integers(2, 4))
        net = random_mlp(g, [d, int(g.integers(4, 7)), int(g.integers(4, 7)), 2])
        p = float(g.choice([np.inf, 2.0, 1.0]))
        prob = random_problem(g, net, p=p, clip=(-2.0, 2.0) if trial % 4 == 0 else None)
        enc = prob.encoded_network()
        with_splits = trial % 5 == 2
        splits = None
        bounds = compute_bounds(enc, prob)
        if with_splits:
            splits = {}
            for rid, (l, u) in bounds.items():
                s = np.zeros(l.shape[0], dtype=np.int8)
                unstable = np.nonzero((l < 0) & (u > 0))[0]
                if unstable.size:
                    s[unstable[0]] = g.choice([-1, 1])
                splits[rid] = s
            try:
                bounds = compute_bounds(enc, prob, splits=splits)
            except Exception:
                continue
        mnc_view = None
        if trial % 3 == 0:
            mnc = generate(enc, prob, bounds, MncConfig(max_pairs_per_layer=5, max_facets_per_pair=6))
            mnc_view = mnc.engine_view() if mnc.total() else None
        params = _random_valid_params(g, bounds, splits, mnc_view)
        row = np.zeros((1, enc.output_dim))
        row[0, 0] = 1.0
        expr = LinearExpression(row, np.zeros(1))
        res = bound_and_gradient(enc, prob, splits, mnc_view, params, bounds, expr=expr)
        primal, witness = primal_upper_bound(res.expr0, prob)

        xs = sample_region(prob, 10_000, rng)
        if splits is not None:
            z = xs
            keep = np.ones(xs.shape[0], dtype=bool)
            for layer in enc.layers:
                if isinstance(layer, Affine):
                    z = z @ layer.W.T + layer.b
                elif isinstance(layer, ReLU):
                    s = splits[layer.relu_id]
                    keep &= ((z >= 0) | (s != -1)).all(axis=1)
                    keep &= ((z <= 0) | (s != 1)).all(axis=1)
                    z = np.maximum(z, 0.0)
            xs = xs[keep]
            if xs.shape[0] < 100:
                continue
        vals = enc.forward(xs)[:, 0]
        # the primal witness is itself a sampled region point (of the full
        # ball; split subregions are sampled separately by rejection)
        assert prob.contains(witness, tol=1e-9)
        margins_at_witness = float(enc.forward(witness).min())
        assert margins_at_witness == primal
        sampled_min = float(vals.min())
        if splits is None:
            sampled_min = min(sampled_min, float(enc.forward(witness)[0]))
            assert primal >= min(margins_at_witness, float(enc.forward(xs).min())) - 1e-9
        assert res.bound[0] <= sampled_min + 1e-12, f"trial {trial}: unsound lower bound"
        if p == np.inf and splits is None and prob.network.input_dim <= 4:
            try:
                om = exact_min(prob.network, prob)
            except Exception:
                om = None
            if om is not None:
                assert primal >= float(om.mins.min()) - 1e-9
                assert res.bound[0] <= float(om.mins[0]) + 1e-9
        checked += 1
    _report(
        "C02 soundness-fuzzing",
        checked == 200,
        f"{checked}/200 triples fuzzed; lower bound below every sampled value, "
        "primal witness concrete and inside the region",
    )


# -- 3. gradient correctness ---------------------------------------------------


def test_c03_gradient_correctness():
    from test_dual_opt import _rand_interior, _setup

    counts = {"alpha": 0, "beta": 0, "gamma": 0}
    fails = 0
    seed = 0
    while min(counts.values()) < 100 and seed < 200:
        rng, net, problem, splits, mnc_view, bounds, params, expr = _setup(
            seed, with_mnc=True, with_splits=True
        )
        _rand_interior(rng, params)
        res = bound_and_gradient(net, problem, splits, mnc_view, params, bounds, expr=expr, want_a_prime=True)
        boundary = any(np.abs(ap).min(initial=np.inf) <= 1e-3 for ap in res.a_prime.values())
        boundary |= np.abs(res.expr0.a).min(initial=np.inf) <= 1e-3
        if not boundary:
            h = 1e-6
            for rid in sorted(params):
                pset = params[rid]
                g = res.grads.get(rid)
                for cls, arr, grad in zip(("alpha", "beta", "gamma"), (pset.alpha, pset.beta, pset.gamma), g):
                    for i in range(arr.size):
                        old = arr[i]
                        arr[i] = old + h
                        up = bound_and_gradient(net, problem, splits, mnc_view, params, bounds, expr=expr)
                        arr[i] = old - h
                        dn = bound_and_gradient(net, problem, splits, mnc_view, params, bounds, expr=expr)
                        arr[i] = old
                        fd = (float(up.bound.sum()) - float(dn.bound.sum())) / (2 * h)
                        denom = max(abs(fd), abs(grad[i]), 1e-6)
                        if abs(fd - grad[i]) / denom >= 1e-4:
                            fails += 1
                        counts[cls] += 1
        seed += 1
    ok = fails == 0 and all(v >= 100 for v in counts.values())
    _report(
        "C03 gradient-correctness",
        ok,
        f"finite differences match at {counts} interior points, {fails} mismatches "
        "(rel. err < 1e-4, h=1e-6)",
    )


# -- 4. DeepPoly equivalence -----------------------------------------------------


def test_c04_deeppoly_equivalence():
    worst = 0.0
    for seed in range(30):
        rng = np.random.default_rng(9000 + seed)
        dims = [int(rng.integers(2, 5))] + [
            int(rng.integers(3, 8)) for _ in range(rng.integers(1, 4))
        ] + [3]
        net = random_mlp(rng, dims)
        prob = random_problem(rng, net, clip=(-2.0, 2.0) if seed % 3 == 0 else None)
        ref = DeepPolyReference(net, prob)
        mine = compute_bounds(net, prob)
        for rid, (l, u) in mine.items():
            rl, ru = ref.pre_bounds[rid]
            for a, b in ((l, rl), (u, ru)):
                rel = np.abs(a - b) / np.maximum(np.abs(b), 1e-12)
                worst = max(worst, float(rel.max(initial=0.0)))
        ctx = BoundContext(bounds=mine, side="lower")
        expr = LinearExpression.identity(net.output_dim)
        lo = bound_query(expr, net.output_frames(), prob, ctx).bound
        ref_lo, _ = ref.output_bounds()
        rel = np.abs(lo - ref_lo) / np.maximum(np.abs(ref_lo), 1e-12)
        worst = max(worst, float(rel.max()))
    _report(
        "C04 deeppoly-equivalence",
        worst < 1e-9,
        f"30 networks match the independent reference; worst relative gap {worst:.2e} (< 1e-9)",
    )


# -- 5. MNC soundness -------------------------------------------------------------


def test_c05_mnc_soundness():
    rng = np.random.default_rng(11)
    layers_checked = 0
    worst_slack = 0.0
    for seed in range(12):
        g = np.random.default_rng(7000 + seed)
        net = random_mlp(g, [int(g.integers(2, 4)), int(g.integers(5, 8)), int(g.integers(5, 8)), 2])
        prob = random_problem(g, net)
        bounds = compute_bounds(net, prob)
        mnc = generate(net, prob, bounds)
        if mnc.total() == 0:
            continue
        xs = sample_region(prob, 10_000, rng)
        z = xs
        for layer in net.layers:
            if isinstance(layer, Affine):
                z = z @ layer.W.T + layer.b
            elif isinstance(layer, ReLU):
                lay = mnc.layers.get(layer.relu_id)
                if lay is not None:
                    post = np.maximum(z, 0.0)
                    slack = post @ lay.P.T + z @ lay.Ph.T - lay.p
                    worst_slack = max(worst_slack, float(slack.max()))
                    layers_checked += 1
                z = np.maximum(z, 0.0)
    sound = worst_slack <= 1e-9

    # pipeline bit-match: disabled constraints vs an empty constraint set
    prob = None
    for seed in range(60):
        prob = tiny_instance(seed)
        if prob is not None:
            break
    r_off = verify(prob, RunConfig(mnc_enabled=False, timeout=60))
    r_empty = verify(prob, RunConfig(mnc_enabled=True, mnc_max_pairs_per_layer=0, timeout=60))
    bit_match = (
        r_off.status == r_empty.status
        and r_off.subproblems_visited == r_empty.subproblems_visited
        and r_off.global_lower_bound == r_empty.global_lower_bound
    )
    ok = sound and layers_checked >= 10 and bit_match
    _report(
        "C05 mnc-soundness",
        ok,
        f"{layers_checked} layers x 10^4 reachable samples, worst slack {worst_slack:.2e} "
        f"(>= -1e-9); disabled pipeline bit-matches the gamma-free run: {bit_match}",
    )


# -- 6. MNC effectiveness ----------------------------------------------------------


def test_c06_mnc_effectiveness():
    ratios = []
    seed = 0
    cfg_kw = dict(timeout=120.0, max_subproblems=100_000)
    while len(ratios) < 30 and seed < 150:
        prob = correlated_instance(seed)
        seed += 1
        if prob is None:
            continue
        base = verify(prob, RunConfig(mnc_enabled=False, **cfg_kw))
        if base.status != "verified" or base.subproblems_visited <= prob.num_rows:
            continue  # decided before any branching: no ratio to measure
        with_m = verify(prob, RunConfig(mnc_enabled=True, **cfg_kw))
        if with_m.status != "verified":
            continue
        ratios.append(base.subproblems_visited / max(with_m.subproblems_visited, 1))
    ratios = np.array(ratios)
    geomean = float(np.exp(np.log(ratios).mean())) if ratios.size else 0.0
    qs = np.percentile(ratios, [0, 25, 50, 75, 100]) if ratios.size else []
    ok = ratios.size >= 30 and geomean >= 1.5
    _report(
        "C06 mnc-effectiveness",
        ok,
        f"{ratios.size} correlated instances, visited-subproblem ratio (no-MNC/MNC) "
        f"geomean {geomean:.2f} (>= 1.5); distribution min/q25/med/q75/max = "
        + "/".join(f"{q:.2f}" for q in qs),
    )


# -- 7. CAB correctness --------------------------------------------------------------


def _hand_architectures():
    # (input_dim, [(kind, width, extra)]) with closed-form layer costs
    return [
        (3, [("affine", 4), ("relu", 4), ("affine", 2)]),
        (2, [("affine", 6), ("relu", 6), ("affine", 3)]),
        (4, [("affine", 5), ("relu", 5), ("affine", 5), ("relu", 5), ("affine", 2)]),
        (3, [("affine", 8), ("relu", 8), ("affine", 4), ("relu", 4), ("affine", 2)]),
        (2, [("affine", 3), ("relu", 3), ("affine", 3), ("relu", 3), ("affine", 3), ("relu", 3), ("affine", 1)]),
        (5, [("affine", 7), ("relu", 7), ("affine", 2)]),
        (2, [("affine", 4), ("relu", 4), ("affine", 6), ("relu", 6), ("affine", 8), ("relu", 8), ("affine", 2)]),
        (3, [("affine", 10), ("relu", 10), ("affine", 5), ("relu", 5), ("affine", 5), ("relu", 5), ("affine", 3)]),
        (4, [("affine", 4), ("relu", 4), ("affine", 4), ("relu", 4), ("affine", 4), ("relu", 4), ("affine", 4)]),
        (2, [("affine", 9), ("relu", 9), ("affine", 9), ("relu", 9), ("affine", 1)]),
    ]


def test_c07_cab_correctness():
    rng = np.random.default_rng(13)
    checked = 0
    for input_dim, spec_layers in _hand_architectures():
        layers = []
        prev = input_dim
        widths = []
        costs = []
        for kind, w in spec_layers:
            if kind == "affine":
                layers.append(Affine(rng.normal(size=(w, prev)), np.zeros(w)))
                costs.append(w * prev)  # number of weight elements
                prev = w
            else:
                layers.append(ReLU(w))
                costs.append(w)  # d_j with no constraint rows
            widths.append(w)
        net = Network(layers, input_dim)
        model = SplitCostModel.build(net)
        assert model.layer_costs == [float(c) for c in costs]
        # closed form: split at relu position k costs sum_{i>k} 2 d_i C_i
        for rid, k in model.relu_pos.items():
            want = 0.0
            for i in range(k + 1, len(widths)):
                want += 2.0 * widths[i] * sum(costs[:i])
            assert model.split_cost(rid) == want
            checked += 1
    # relu cost includes the constraint-row count
    net = Network(
        [Affine(rng.normal(size=(8, 3)), np.zeros(8)), ReLU(8), Affine(rng.normal(size=(1, 8)), np.zeros(1))],
        3,
    )
    from mnbab.mnc import MncLayer, MncSet

    mnc = MncSet({0: MncLayer(np.zeros((3, 8)), np.zeros((3, 8)), np.zeros(3), [])})
    assert SplitCostModel.build(net, mnc).layer_costs[1] == 8 + 3

    # decision invariance under uniform cost scaling
    class Scaled:
        def __init__(self, lam, base):
            self.lam, self.base = lam, base

        def split_cost(self, rid):
            return self.lam * self.base[rid]

    bounds = {0: (np.array([-1.0, -1.0]), np.array([1.0, 1.0])),
              1: (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))}
    scores = {0: np.array([0.8, 0.3]), 1: np.array([0.7, 0.6])}
    base_costs = {0: 64.0, 1: 12.0}
    d1 = decide(scores, bounds, None, Scaled(1.0, base_costs), cab=True)
    invariant = all(
        decide(scores, bounds, None, Scaled(lam, base_costs), cab=True) == d1
        for lam in (0.01, 3.0, 1000.0)
    )
    _report(
        "C07 cab-correctness",
        checked >= 10 and invariant,
        f"{checked} hand-computed split costs reproduced exactly on 10 architectures; "
        f"decision invariant under uniform cost scaling: {invariant}",
    )


# -- 8. Hölder concretization -----------------------------------------------------------


def test_c08_holder_concretization():
    rng = np.random.default_rng(17)
    worst = 0.0
    for case in range(100):
        d = int(rng.integers(1, 11))
        net = Network([Affine(np.eye(d), np.zeros(d))], d)
        clip = (-1.5, 1.5) if case % 3 == 0 else None
        prob = VerificationProblem(
            net, rng.uniform(-1, 1, d), float(rng.uniform(0.01, 1.0)), np.inf,
            np.zeros((1, d)), np.zeros(1), clip,
        )
        a = rng.normal(size=(1, d))
        c = rng.normal(size=1)
        lo, hi = prob.input_box()
        best = min(
            float(a[0] @ np.array(v) + c[0]) for v in itertools.product(*zip(lo, hi))
        )
        vals, _ = concretize(LinearExpression(a, c), prob, "lower")
        worst = max(worst, abs(vals[0] - best))
    _report(
        "C08 holder-concretization",
        worst < 1e-12,
        f"100 cases (dim <= 10) match the box-vertex minimum; worst gap {worst:.2e} (< 1e-12)",
    )


# -- 9. fully-split exactness -------------------------------------------------------------


def test_c09_fully_split_exactness():
    done = 0
    worst = 0.0
    seed = 0
    while done < 20 and seed < 120:
        rng = np.random.default_rng(3000 + seed)
        seed += 1
        net = random_mlp(rng, [2, 3, 3, 2])
        prob = random_problem(rng, net, eps=float(rng.uniform(0.2, 0.5)))
        enc = prob.encoded_network()
        bounds = compute_bounds(enc, prob)
        n_unstable = sum(int(((l < 0) & (u > 0)).sum()) for l, u in bounds.values())
        if not 1 <= n_unstable <= 6:
            continue
        # fix every unstable neuron to the phase of a sampled interior point
        x = prob.x0 + rng.uniform(-prob.eps, prob.eps, 2) * 0.5
        z = x
        splits = {}
        for layer in enc.layers:
            if isinstance(layer, Affine):
                z = layer.W @ z + layer.b
            elif isinstance(layer, ReLU):
                l, u = bounds[layer.relu_id]
                s = np.zeros(z.shape[0], dtype=np.int8)
                unstable = (l < 0) & (u > 0)
                s[unstable] = np.where(z[unstable] >= 0, -1, 1)
                splits[layer.relu_id] = s
                z = np.maximum(z, 0.0)
        try:
            sub_bounds = compute_bounds(enc, prob, splits=splits)
        except Exception:
            continue
        ores = exact_min(prob.network, prob, forced=splits)
        params = init_param_group(sub_bounds, splits, None)
        expr = LinearExpression(np.array([[1.0, 0.0]])[:, : enc.output_dim], np.zeros(1))
        res = optimize(enc, prob, splits, None, params, sub_bounds, 500, expr=expr, early_exit=False)
        gap = float(ores.mins[0]) - res.bound
        worst = max(worst, abs(gap))
        assert res.bound <= float(ores.mins[0]) + 1e-9  # from below
        done += 1
    ok = done >= 20 and worst < 1e-3
    _report(
        "C09 fully-split-exactness",
        ok,
        f"{done} fully split subproblems optimized to within {worst:.2e} of the exact "
        "LP value (< 1e-3), always from below",
    )


# -- 10. determinism ---------------------------------------------------------------------


def test_c10_determinism():
    done = 0
    for seed in range(60):
        prob = tiny_instance(seed)
        if prob is None:
            continue
        cfg_a = RunConfig(seed=11, timeout=120.0)
        cfg_b = RunConfig(seed=11, timeout=120.0)
        r1 = verify(prob, cfg_a)
        r2 = verify(prob, cfg_b)
        same = (
            r1.status == r2.status
            and r1.subproblems_visited == r2.subproblems_visited
            and r1.global_lower_bound == r2.global_lower_bound
            and (
                (r1.witness is None and r2.witness is None)
                or np.array_equal(r1.witness, r2.witness)
            )
        )
        assert same, f"seed {seed} diverged"
        done += 1
        if done >= 8:
            break
    _report(
        "C10 determinism",
        done >= 8,
        f"{done} instances re-run with the same seed: verdict, bit-exact bound and "
        "subproblem count identical",
    )
