"""Branching decisions: which unstable neuron to split next.

Two scores are available.  The active-constraint score of a neuron sums
the multi-neuron-constraint sensitivities of its pre- and
post-activation, |gamma.P|_j + |gamma.Phat|_j, read off the best
multipliers of the last bounding run at no extra backsubstitution cost.
The classic relaxation-intercept score serves as baseline and as
fallback when no constraint is active.  Either score can be divided by
an estimated FLOP cost of the bound recomputation the split triggers
(cost-adjusted branching).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import Affine, Network, ReLU


class NoSplitCandidateError(RuntimeError):
    """Every unstable neuron is already split."""


def candidate_mask(bounds, splits, rid: int) -> np.ndarray:
    l, u = bounds[rid]
    mask = (l < 0.0) & (u > 0.0)
    if splits is not None and rid in splits:
        mask &= splits[rid] == 0
    return mask


def acs_score(params, mnc, bounds, splits) -> Dict[int, np.ndarray]:
    """Per-neuron sum of active-constraint sensitivities; zero outside
    unstable, unsplit neurons."""
    scores: Dict[int, np.ndarray] = {}
    for rid in bounds:
        l, _ = bounds[rid]
        s = np.zeros(l.shape[0])
        lay = None if mnc is None else mnc.layers.get(rid)
        pset = None if params is None else params.get(rid)
        if lay is not None and pset is not None and pset.gamma.size:
            s = np.abs(pset.gamma @ lay.P) + np.abs(pset.gamma @ lay.Ph)
        s = np.where(candidate_mask(bounds, splits, rid), s, 0.0)
        scores[rid] = s
    return scores


def babsr_score(a_prime, bounds, splits) -> Dict[int, np.ndarray]:
    """Relaxation-contribution score from one recorded backsubstitution
    pass of the objective.

    For neuron j with coefficient a'_j (after constraint folding) and
    bounds l_j < 0 < u_j the score is

        |a'_j| * u_j|l_j| / (u_j - l_j)          when a'_j < 0
        |a'_j| * min(u_j, -l_j)^2 / (u_j - l_j)  otherwise

    i.e. the intercept term a negative coefficient currently pays, or a
    small-slope proxy for the improvement a positive coefficient can gain
    from making the neuron exact.
    """
    scores: Dict[int, np.ndarray] = {}
    for rid in bounds:
        l, u = bounds[rid]
        mask = candidate_mask(bounds, splits, rid)
        s = np.zeros(l.shape[0])
        ap = None if a_prime is None else a_prime.get(rid)
        if ap is not None and mask.any():
            row = np.abs(ap).sum(axis=0) if ap.ndim == 2 else np.abs(ap)
            sgn_neg = (ap if ap.ndim == 1 else ap.sum(axis=0)) < 0.0
            denom = np.where(mask, u - l, 1.0)
            intercept = u * np.abs(l) / denom
            small = np.minimum(u, -l) ** 2 / denom
            s = row * np.where(sgn_neg, intercept, small)
            s = np.where(mask, s, 0.0)
        scores[rid] = s
    return scores


# -- cost model ---------------------------------------------------------------


@dataclass
class SplitCostModel:
    """FLOP model of recomputing bounds after a split at a given layer.

    Per-layer backsubstitution costs: d_j + p_j for a ReLU layer with p_j
    constraint rows, the weight-matrix element count for a dense affine
    layer, d_j * k_j^2 for a materialized convolution.  A split at
    sequence position k costs sum over later positions i of 2 d_i C_i
    with C_i the cumulative cost of a full backsubstitution from i.
    """

    widths: List[int]
    layer_costs: List[float]
    relu_pos: Dict[int, int]

    @staticmethod
    def build(net: Network, mnc=None) -> "SplitCostModel":
        widths: List[int] = []
        costs: List[float] = []
        relu_pos: Dict[int, int] = {}

        def walk(chain):
            for layer in chain:
                if isinstance(layer, Affine):
                    widths.append(layer.out_width)
                    if layer.conv_meta is not None:
                        costs.append(float(layer.out_width * layer.conv_meta.kh ** 2))
                    else:
                        costs.append(float(layer.W.size))
                elif isinstance(layer, ReLU):
                    p_j = 0 if mnc is None else mnc.count(layer.relu_id)
                    relu_pos[layer.relu_id] = len(widths)
                    widths.append(layer.width)
                    costs.append(float(layer.width + p_j))
                else:
                    walk(layer.branch)
                    widths.append(widths[-1])
                    costs.append(float(widths[-1]))

        walk(net.layers)
        return SplitCostModel(widths, costs, relu_pos)

    def split_cost(self, rid: int) -> float:
        k = self.relu_pos[rid]
        cum = np.concatenate([[0.0], np.cumsum(self.layer_costs)])
        total = 0.0
        for i in range(k + 1, len(self.widths)):
            total += 2.0 * self.widths[i] * cum[i]
        return total


def split_cost(net: Network, mnc, rid: int) -> float:
    return SplitCostModel.build(net, mnc).split_cost(rid)


def decide(
    scores: Dict[int, np.ndarray],
    bounds,
    splits,
    cost_model: Optional[SplitCostModel] = None,
    cab: bool = False,
) -> Tuple[int, int]:
    """Pick the unstable unsplit neuron with the highest (optionally
    cost-adjusted) score; ties break toward the lower layer then the
    lower neuron index."""
    best = None
    best_val = -np.inf
    for rid in sorted(scores):
        mask = candidate_mask(bounds, splits, rid)
        if not mask.any():
            continue
        s = scores[rid]
        if cab:
            s = s / cost_model.split_cost(rid)
        for j in np.nonzero(mask)[0]:
            if s[j] > best_val:
                best_val = float(s[j])
                best = (rid, int(j))
    if best is None:
        raise NoSplitCandidateError("every unstable neuron is already split")
    return best


def apply_split(sub, decision: Tuple[int, int], s_value: int):
    """Child subproblem with the split-matrix entry set (-1 enforces
    zhat_j >= 0, +1 enforces zhat_j < 0).  Cached bounds up to the split
    layer are copied bit-exactly; later layers are marked stale; the split
    neuron's own stored interval is clamped to its half-line."""
    from .bab import Subproblem

    rid, j = decision
    if s_value not in (-1, 1):
        raise ValueError("s_value must be -1 or +1")
    old = sub.splits.get(rid)
    if old is not None and old[j] != 0:
        raise ValueError(f"neuron ({rid}, {j}) is already split")

    splits = dict(sub.splits)
    width = sub.bounds[rid][0].shape[0]
    s = np.zeros(width, dtype=np.int8) if old is None else old.copy()
    s[j] = s_value
    splits[rid] = s

    bounds = dict(sub.bounds)
    l, u = bounds[rid]
    l, u = l.copy(), u.copy()
    if s_value == -1:
        l[j] = max(l[j], 0.0)
    else:
        u[j] = min(u[j], 0.0)
    bounds[rid] = (l, u)

    stale = {r for r in bounds if r > rid} | {r for r in sub.stale if r != rid}
    return Subproblem(
        splits=splits,
        bounds=bounds,
        stale=stale,
        bound=sub.bound,
        warm=sub.warm,
        depth=sub.depth + 1,
    )
