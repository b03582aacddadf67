"""Exact ground-truth verifier for tiny networks.

Every assignment of phases to the unstable ReLU neurons makes the
network affine; the input region splits into polytopal cells (the input
box intersected with the per-neuron sign constraints).  The exact
minimum of an affine objective over a bounded polytope sits on a vertex,
so each feasible cell is solved by vertex enumeration in input space.
Vertex sets are maintained incrementally along the depth-first phase
enumeration: cutting a polytope with one halfspace keeps the surviving
vertices and adds only vertices supported on the new hyperplane.

Deliberately limited to p = inf, input dimension <= 4 and at most 20
unstable neurons; anything larger is refused instead of silently
exploding.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import Affine, Network, ReLU, VerificationProblem
from .relax import interval_bounds

FEAS_TOL = 1e-9
MAX_UNSTABLE = 20
MAX_INPUT_DIM = 4


class OracleGuardError(ValueError):
    """Instance outside the enumeration-feasibility guard."""


@dataclass
class _Cell:
    rows: np.ndarray  # (m, d) constraint normals, g.x <= h
    rhs: np.ndarray  # (m,)
    verts: np.ndarray  # (n, d) vertex set of {box & rows}


def _box_cell(lo: np.ndarray, hi: np.ndarray) -> _Cell:
    d = lo.shape[0]
    rows = np.vstack([np.eye(d), -np.eye(d)])
    rhs = np.concatenate([hi, -lo])
    corners = np.array(list(itertools.product(*zip(lo, hi))))
    return _Cell(rows, rhs, corners)


_COMBO_CACHE: Dict[Tuple[int, int], np.ndarray] = {}


def _combos(m: int, k: int) -> np.ndarray:
    key = (m, k)
    if key not in _COMBO_CACHE:
        _COMBO_CACHE[key] = np.array(list(itertools.combinations(range(m), k)), dtype=np.int64)
    return _COMBO_CACHE[key]


def _add_halfspace(cell: _Cell, g: np.ndarray, h: float) -> Optional[_Cell]:
    """Cut the cell with g.x <= h; returns None when the result is empty.

    New vertices lie on the new hyperplane, so only combinations that
    include the new row need solving; a halfspace satisfied by every
    vertex does not cut the cell at all and is dropped as redundant.
    """
    scale = np.abs(g).max()
    if scale < 1e-14:
        return None if h < -FEAS_TOL else cell
    g = g / scale
    h = h / scale
    d = cell.rows.shape[1]
    slack = cell.verts @ g - h
    if slack.min() > FEAS_TOL:
        return None
    if slack.max() <= FEAS_TOL:
        return cell  # whole cell already inside: redundant row
    kept = cell.verts[slack <= FEAS_TOL]
    rows = np.vstack([cell.rows, g])
    rhs = np.append(cell.rhs, h)
    m = cell.rows.shape[0]
    if d == 1:
        new_pts = np.array([[h / g[0]]])
        feas = ((new_pts @ rows.T - rhs) <= FEAS_TOL).all(axis=1)
        new_pts = new_pts[feas]
    else:
        idx = _combos(m, d - 1)
        A = np.empty((idx.shape[0], d, d))
        A[:, : d - 1, :] = cell.rows[idx]
        A[:, d - 1, :] = g
        bvec = np.empty((idx.shape[0], d))
        bvec[:, : d - 1] = cell.rhs[idx]
        bvec[:, d - 1] = h
        dets = np.abs(np.linalg.det(A))
        ok = dets > 1e-10
        new_pts = np.zeros((0, d))
        if ok.any():
            sols = np.linalg.solve(A[ok], bvec[ok][..., None])[..., 0]
            feas = ((sols @ rows.T - rhs) <= FEAS_TOL).all(axis=1)
            new_pts = sols[feas]
    if new_pts.shape[0]:
        verts = np.vstack([kept, new_pts]) if kept.size else new_pts
    else:
        verts = kept
    if verts.size == 0:
        return None
    verts = np.unique(np.round(verts, 10), axis=0)
    return _Cell(rows, rhs, verts)


def _sym_chain(chain, M, m, masks):
    """Affine map of each layer output in x under fixed ReLU masks; also
    yields (rid, pre_M, pre_m) for every ReLU crossed."""
    pre = []
    for layer in chain:
        if isinstance(layer, Affine):
            m = layer.W @ m + layer.b
            M = layer.W @ M
        elif isinstance(layer, ReLU):
            pre.append((layer.relu_id, M, m))
            mask = masks[layer.relu_id].astype(np.float64)
            M = M * mask[:, None]
            m = m * mask
        else:
            bM, bm, bpre = _sym_chain(layer.branch, M, m, masks)
            pre.extend(bpre)
            M = M + bM
            m = m + bm
    return M, m, pre


def _pattern_maps(net: Network, masks):
    d = net.input_dim
    return _sym_chain(net.layers, np.eye(d), np.zeros(d), masks)


@dataclass
class OracleResult:
    mins: np.ndarray  # per property row
    witnesses: np.ndarray  # (rows, input_dim) argmin vertex per row
    patterns: Optional[List[Dict[int, np.ndarray]]] = None


def exact_min(
    net: Network,
    problem: VerificationProblem,
    forced: Optional[Dict[int, np.ndarray]] = None,
    collect_patterns: bool = False,
) -> OracleResult:
    """True minimum of every property row over the region (optionally
    restricted by forced split phases, s = -1 active / +1 inactive)."""
    if problem.p != np.inf:
        raise OracleGuardError("exact oracle supports p = inf only")
    if net.input_dim > MAX_INPUT_DIM:
        raise OracleGuardError(f"input dim {net.input_dim} > {MAX_INPUT_DIM}")
    enc = VerificationProblem(
        net, problem.x0, problem.eps, problem.p,
        problem.property_rows, problem.offsets, problem.clip,
    ).encoded_network()

    ivals = interval_bounds(enc, problem, forced)
    free: List[Tuple[int, int]] = []
    base_masks: Dict[int, np.ndarray] = {}
    for site in enc.relu_sites:
        l, u = ivals[site.relu_id]
        s = None if forced is None else forced.get(site.relu_id)
        mask = l >= 0.0
        for j in range(site.width):
            sj = 0 if s is None else int(s[j])
            if sj == -1:
                mask[j] = True
            elif sj == 1:
                mask[j] = False
            elif l[j] < 0.0 < u[j]:
                free.append((site.relu_id, j))
        base_masks[site.relu_id] = mask
    if len(free) > MAX_UNSTABLE:
        raise OracleGuardError(f"{len(free)} unstable neurons > {MAX_UNSTABLE}")

    lo, hi = problem.input_box()
    root = _box_cell(lo, hi)
    if forced is not None:
        root = _apply_forced(enc, base_masks, forced, root)
        if root is None:
            return OracleResult(
                np.full(problem.num_rows, np.inf),
                np.tile(problem.x0, (problem.num_rows, 1)),
                [] if collect_patterns else None,
            )

    n_rows = problem.num_rows
    best = np.full(n_rows, np.inf)
    best_x = np.tile(problem.x0, (n_rows, 1))
    patterns: Optional[list] = [] if collect_patterns else None
    free_by_layer: Dict[int, List[int]] = {}
    for rid, j in free:
        free_by_layer.setdefault(rid, []).append(j)
    order = [site.relu_id for site in enc.relu_sites]

    def leaf(masks, cell):
        nonlocal best, best_x
        M, m, _ = _pattern_maps(enc, masks)
        vals = cell.verts @ M.T + m
        mins = vals.min(axis=0)
        arg = vals.argmin(axis=0)
        upd = mins < best
        best = np.where(upd, mins, best)
        for r in np.nonzero(upd)[0]:
            best_x[r] = cell.verts[arg[r]]
        if patterns is not None:
            patterns.append({rid: masks[rid].copy() for rid in masks})

    def descend(layer_pos, masks, cell):
        if layer_pos == len(order):
            leaf(masks, cell)
            return
        rid = order[layer_pos]
        todo = free_by_layer.get(rid, [])
        if not todo:
            descend(layer_pos + 1, masks, cell)
            return
        _, _, pre = _pattern_maps(enc, masks)
        pre_map = {r: (M, m) for r, M, m in pre}
        M, m = pre_map[rid]

        def branch(idx, masks, cell):
            if idx == len(todo):
                descend(layer_pos + 1, masks, cell)
                return
            j = todo[idx]
            for active in (True, False):
                g = -M[j] if active else M[j]
                h = float(m[j]) if active else float(-m[j])
                child = _add_halfspace(cell, g, h)
                if child is None:
                    continue
                masks[rid][j] = active
                branch(idx + 1, masks, child)
            masks[rid][j] = False

        branch(0, masks, cell)

    descend(0, {r: v.copy() for r, v in base_masks.items()}, root)
    return OracleResult(best, best_x, patterns)


def _apply_forced(enc, masks, forced, cell):
    """Intersect the root cell with all forced split halfspaces (the
    masked affine pre-activations equal the true ones on the split
    region, so these rows carve it out exactly)."""
    _, _, pre = _pattern_maps(enc, masks)
    for rid, M, m in pre:
        s = forced.get(rid)
        if s is None:
            continue
        for j in np.nonzero(s != 0)[0]:
            if s[j] == -1:
                cell = _add_halfspace(cell, -M[j], float(m[j]))
            else:
                cell = _add_halfspace(cell, M[j], float(-m[j]))
            if cell is None:
                return None
    return cell


def exact_verdict(problem: VerificationProblem):
    """'verified' when every property row stays > 0 over the region, else
    'falsified' with the minimizing vertex as witness."""
    res = exact_min(problem.network, problem)
    if (res.mins > 0.0).all():
        return "verified", None, res
    row = int(np.argmin(res.mins))
    return "falsified", res.witnesses[row], res
