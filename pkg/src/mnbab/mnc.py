"""Multi-neuron constraints over ReLU layers: rows P z + Phat zhat <= p
jointly sound for the pre/post-activation vectors of a layer.

Rows are generated pairwise: for two unstable neurons the joint input
region is the box intersected with sound bounds on zhat_j + zhat_k and
zhat_j - zhat_k (an octagon capturing pairwise correlation), and the
emitted rows are the exact facets of the 4-D convex hull of the ReLU
graph over that octagon.  The hull of a piecewise-linear graph is the
hull of finitely many points: octagon vertices, crossings of octagon
edges with the two activation axes, and the origin when it lies inside.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import Network, VerificationProblem
from .relax import BoundContext, LinearExpression, backsubstitute, concretize

FACET_TOL = 1e-9
DEDUP_TOL = 1e-7


@dataclass
class MncLayer:
    P: np.ndarray  # (e, d) over post-activations
    Ph: np.ndarray  # (e, d) over pre-activations
    p: np.ndarray  # (e,)
    pairs: List[Tuple[int, int]] = field(default_factory=list)


@dataclass
class MncSet:
    layers: Dict[int, MncLayer] = field(default_factory=dict)

    def engine_view(self) -> Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return {rid: (lay.P, lay.Ph, lay.p) for rid, lay in self.layers.items()}

    def count(self, rid: int) -> int:
        lay = self.layers.get(rid)
        return 0 if lay is None else lay.p.shape[0]

    def total(self) -> int:
        return sum(lay.p.shape[0] for lay in self.layers.values())


def octahedral_pair_bounds(
    net: Network,
    problem: VerificationProblem,
    bounds,
    rid: int,
    j: int,
    k: int,
) -> Tuple[float, float, float, float]:
    """Sound bounds (lo_s, up_s, lo_d, up_d) on zhat_j + zhat_k and
    zhat_j - zhat_k via backsubstitution with default parameters."""
    site = net.relu_sites[rid]
    rows = np.zeros((2, site.width))
    rows[0, j] = 1.0
    rows[0, k] = 1.0
    rows[1, j] = 1.0
    rows[1, k] = -1.0
    los, ups = _pair_query_bounds(rows, site, problem, bounds)
    return float(los[0]), float(ups[0]), float(los[1]), float(ups[1])


def _pair_query_bounds(rows, site, problem, bounds):
    expr = LinearExpression(rows, np.zeros(rows.shape[0]))
    out = {}
    for side in ("lower", "upper"):
        ctx = BoundContext(bounds=bounds, side=side)
        expr0, _ = backsubstitute(expr, site.frames, ctx)
        out[side], _ = concretize(expr0, problem, side)
    return out["lower"], out["upper"]


def pair_hull_constraints(
    lj: float,
    uj: float,
    lk: float,
    uk: float,
    oct_bounds: Tuple[float, float, float, float],
) -> List[Tuple[np.ndarray, np.ndarray, float]]:
    """Exact facets of conv{(relu(v), v) : v in octagon} as <= rows
    ((P_j, P_k), (Phat_j, Phat_k), p), normalized to coefficient
    inf-norm 1.  Returns [] when the hull degenerates below dimension 4.
    """
    lo_s, up_s, lo_d, up_d = oct_bounds
    # Halfspaces g.v <= h of the octagon in (zhat_j, zhat_k).
    half = np.array(
        [
            [-1.0, 0.0, -lj],
            [1.0, 0.0, uj],
            [0.0, -1.0, -lk],
            [0.0, 1.0, uk],
            [-1.0, -1.0, -lo_s],
            [1.0, 1.0, up_s],
            [-1.0, 1.0, -lo_d],
            [1.0, -1.0, up_d],
        ]
    )
    # Candidate breakpoints: pairwise crossings of octagon edge lines and
    # the two activation axes, kept when inside the octagon.
    lines = np.vstack([half, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    pts2 = []
    scale = max(abs(uj - lj), abs(uk - lk), 1.0)
    tol = FACET_TOL * scale
    for i1, i2 in itertools.combinations(range(lines.shape[0]), 2):
        A = np.array([lines[i1, :2], lines[i2, :2]])
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        v = np.linalg.solve(A, np.array([lines[i1, 2], lines[i2, 2]]))
        if (half[:, :2] @ v <= half[:, 2] + tol).all():
            pts2.append(v)
    if not pts2:
        return []
    pts2 = _dedupe(np.array(pts2), tol)
    pts4 = np.hstack([np.maximum(pts2, 0.0), pts2])

    centered = pts4 - pts4[0]
    if np.linalg.matrix_rank(centered, tol=1e-9 * scale) < 4:
        return []

    rows: List[Tuple[np.ndarray, np.ndarray, float]] = []
    seen = []
    n = pts4.shape[0]
    for combo in itertools.combinations(range(n), 4):
        base = pts4[combo[0]]
        M = pts4[list(combo[1:])] - base
        _, sv, vt = np.linalg.svd(M)
        if sv[-1] <= 1e-9 * scale:  # affinely dependent 4-tuple
            continue
        g = vt[-1]
        h = float(g @ base)
        slack = pts4 @ g - h
        if slack.max() <= tol:
            cand = (g, h)
        elif slack.min() >= -tol:
            cand = (-g, -h)
        else:
            continue
        g, h = cand
        norm = np.abs(g).max()
        if norm < 1e-12:
            continue
        g = g / norm
        h = h / norm
        key = np.append(g, h)
        if any(np.abs(key - s).max() <= DEDUP_TOL for s in seen):
            continue
        seen.append(key)
        rows.append((g[:2].copy(), g[2:].copy(), h))
    return rows


def _dedupe(pts: np.ndarray, tol: float) -> np.ndarray:
    keep = []
    for v in pts:
        if not any(np.abs(v - w).max() <= tol for w in keep):
            keep.append(v)
    return np.array(keep)


def _triangle_product_vertices(lj, uj, lk, uk) -> np.ndarray:
    """Vertices of the product of the two single-neuron triangle
    relaxations, in (z_j, z_k, zhat_j, zhat_k) order."""
    tri_j = [(0.0, lj), (0.0, 0.0), (uj, uj)]
    tri_k = [(0.0, lk), (0.0, 0.0), (uk, uk)]
    return np.array(
        [(zj, zk, hj, hk) for (zj, hj) in tri_j for (zk, hk) in tri_k]
    )


def _row_tightening(row, tri_verts) -> float:
    """How much a row cuts into the product of triangle relaxations; <= 0
    means the row is implied by single-neuron constraints."""
    pz, phat, off = row
    g = np.concatenate([pz, phat])
    return float((tri_verts @ g).max() - off)


@dataclass
class MncConfig:
    enabled: bool = True
    max_pairs_per_layer: int = 50
    max_facets_per_pair: int = 12


def generate(
    net: Network,
    problem: VerificationProblem,
    bounds,
    config: Optional[MncConfig] = None,
) -> MncSet:
    """Build the constraint set at the root: for each ReLU layer, pick
    unstable-neuron pairs ranked by the product of their triangle
    relaxation areas, compute octagonal joint bounds, emit hull facets
    and drop rows already implied by single-neuron constraints."""
    config = config or MncConfig()
    out = MncSet()
    if not config.enabled or config.max_pairs_per_layer <= 0:
        return out
    for site in net.relu_sites:
        rid = site.relu_id
        l, u = bounds[rid]
        unstable = np.nonzero((l < 0.0) & (u > 0.0))[0]
        if unstable.shape[0] < 2:
            continue
        area = u[unstable] * np.abs(l[unstable]) / (u[unstable] - l[unstable])
        pairs = [
            (unstable[i1], unstable[i2])
            for i1, i2 in itertools.combinations(range(unstable.shape[0]), 2)
        ]
        score = [
            float(area[i1] * area[i2])
            for i1, i2 in itertools.combinations(range(unstable.shape[0]), 2)
        ]
        order = sorted(range(len(pairs)), key=lambda i: (-score[i], pairs[i]))
        chosen = [pairs[i] for i in order[: config.max_pairs_per_layer]]
        if not chosen:
            continue

        # One batched backsubstitution for all pair sums and differences.
        rows = np.zeros((2 * len(chosen), site.width))
        for m, (j, k) in enumerate(chosen):
            rows[2 * m, j] = 1.0
            rows[2 * m, k] = 1.0
            rows[2 * m + 1, j] = 1.0
            rows[2 * m + 1, k] = -1.0
        los, ups = _pair_query_bounds(rows, site, problem, bounds)

        P_rows, Ph_rows, p_rows, used_pairs = [], [], [], []
        for m, (j, k) in enumerate(chosen):
            oct_b = (los[2 * m], ups[2 * m], los[2 * m + 1], ups[2 * m + 1])
            facets = pair_hull_constraints(l[j], u[j], l[k], u[k], oct_b)
            tri = _triangle_product_vertices(l[j], u[j], l[k], u[k])
            scale = max(u[j] - l[j], u[k] - l[k], 1.0)
            keep = [
                (row, _row_tightening(row, tri))
                for row in facets
            ]
            keep = [(row, t) for row, t in keep if t > 1e-9 * scale]
            keep.sort(key=lambda rt: -rt[1])
            for row, _ in keep[: config.max_facets_per_pair]:
                pz, phat, off = row
                P_full = np.zeros(site.width)
                Ph_full = np.zeros(site.width)
                P_full[j], P_full[k] = pz
                Ph_full[j], Ph_full[k] = phat
                P_rows.append(P_full)
                Ph_rows.append(Ph_full)
                p_rows.append(off)
                used_pairs.append((int(j), int(k)))
        if p_rows:
            out.layers[rid] = MncLayer(
                np.array(P_rows), np.array(Ph_rows), np.array(p_rows), used_pairs
            )
    return out
