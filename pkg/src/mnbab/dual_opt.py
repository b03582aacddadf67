"""Projected gradient ascent over the dual parameters.

Bounds stay sound for every point of the parameter domains, so the
optimizer is free to run any number of ascent steps; only the best bound
seen matters.  Parameters are grouped per query: each intermediate-bound
query shares one set per layer and side, the final objective gets its
own unshared set.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .model import Network, VerificationProblem
from .relax import (
    BoundContext,
    BoundResult,
    LinearExpression,
    ParamSet,
    bound_query,
    default_alpha,
    primal_upper_bound,
)

ParamGroup = Dict[int, ParamSet]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BETA_WARM_INIT = 0.05


def init_param_group(
    bounds: Mapping[int, Tuple[np.ndarray, np.ndarray]],
    splits: Optional[Mapping[int, np.ndarray]] = None,
    mnc=None,
) -> ParamGroup:
    """Fresh parameters: default slopes for unstable unsplit neurons,
    gamma = 0 (so the first iterate reproduces the constraint-free bound),
    beta slightly positive for already-split neurons."""
    group: ParamGroup = {}
    for rid, (l, u) in bounds.items():
        s = None if splits is None else splits.get(rid)
        unstable = (l < 0.0) & (u > 0.0)
        if s is not None:
            unstable &= s == 0
            beta_idx = np.nonzero(s != 0)[0]
        else:
            beta_idx = np.zeros(0, dtype=np.int64)
        alpha_idx = np.nonzero(unstable)[0]
        e = 0
        if mnc is not None and rid in mnc:
            e = mnc[rid][2].shape[0]
        group[rid] = ParamSet(
            alpha_idx=alpha_idx,
            alpha=default_alpha(l, u)[alpha_idx],
            beta_idx=beta_idx,
            beta=np.full(beta_idx.shape[0], BETA_WARM_INIT),
            gamma=np.zeros(e),
        )
    return group


def warm_start_group(
    parent: ParamGroup,
    bounds: Mapping[int, Tuple[np.ndarray, np.ndarray]],
    splits: Optional[Mapping[int, np.ndarray]],
    mnc=None,
) -> ParamGroup:
    """Child parameters inherit the parent's best values; the newly split
    neuron loses its alpha slot and gains a beta entry."""
    fresh = init_param_group(bounds, splits, mnc)
    for rid, pset in fresh.items():
        old = parent.get(rid)
        if old is None:
            continue
        if pset.alpha.size and old.alpha.size:
            val = {int(j): float(v) for j, v in zip(old.alpha_idx, old.alpha)}
            pset.alpha = np.array(
                [val.get(int(j), pset.alpha[k]) for k, j in enumerate(pset.alpha_idx)]
            )
        if pset.beta.size and old.beta.size:
            val = {int(j): float(v) for j, v in zip(old.beta_idx, old.beta)}
            pset.beta = np.array(
                [val.get(int(j), BETA_WARM_INIT) for j in pset.beta_idx]
            )
        if pset.gamma.size and old.gamma.size == pset.gamma.size:
            pset.gamma = old.gamma.copy()
    return fresh


@dataclass
class OptimizerState:
    """Adam moments per parameter array plus best-so-far tracking."""

    step: int = 0
    m: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)
    v: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)

    def ensure(self, rid: int, pset: ParamSet) -> None:
        if rid not in self.m:
            zeros = lambda arr: np.zeros_like(arr)
            self.m[rid] = (zeros(pset.alpha), zeros(pset.beta), zeros(pset.gamma))
            self.v[rid] = (zeros(pset.alpha), zeros(pset.beta), zeros(pset.gamma))


def bound_and_gradient(
    net: Network,
    problem: VerificationProblem,
    splits,
    mnc,
    params: ParamGroup,
    bounds,
    expr: Optional[LinearExpression] = None,
    side: str = "lower",
    want_a_prime: bool = False,
) -> BoundResult:
    """Concretized bound of the query plus exact gradients of its sum
    w.r.t. every alpha, beta and gamma entry (case selections fixed at
    their evaluated values)."""
    if expr is None:
        expr = LinearExpression.identity(net.output_dim)
    ctx = BoundContext(bounds=bounds, splits=splits, mnc=mnc, params=params, side=side)
    return bound_query(
        expr, net.output_frames(), problem, ctx, want_grad=True, want_a_prime=want_a_prime
    )


@dataclass
class OptResult:
    bound: float
    bound_vec: np.ndarray
    params: ParamGroup
    a_prime: Dict[int, np.ndarray]
    primal: float
    primal_x: np.ndarray
    iterations: int


def optimize(
    net: Network,
    problem: VerificationProblem,
    splits,
    mnc,
    params: ParamGroup,
    bounds,
    iters: int,
    lr_alpha: float = 0.1,
    lr_beta: float = 0.05,
    lr_gamma: float = 0.05,
    expr: Optional[LinearExpression] = None,
    early_exit: bool = True,
) -> OptResult:
    """Ascend the lower bound with Adam, projecting after every step.

    Returns the best (largest) bound seen with the parameters achieving
    it; exits early once the query is decided (bound > 0, or the primal
    upper bound drops below 0).
    """
    work = {rid: pset.copy() for rid, pset in params.items()}
    state = OptimizerState()
    best_bound = -np.inf
    best_vec = None
    best_params = None
    best_a_prime: Dict[int, np.ndarray] = {}
    best_primal = np.inf
    best_x = problem.x0.copy()
    steps_run = 0

    for t in range(iters + 1):
        res = bound_and_gradient(
            net, problem, splits, mnc, work, bounds, expr=expr, want_a_prime=True
        )
        total = float(res.bound.sum())
        if total > best_bound:
            best_bound = total
            best_vec = res.bound.copy()
            best_params = {rid: pset.copy() for rid, pset in work.items()}
            best_a_prime = {rid: ap.copy() for rid, ap in (res.a_prime or {}).items()}
        primal, x = primal_upper_bound(res.expr0, problem)
        if primal < best_primal:
            best_primal = primal
            best_x = x
        steps_run = t
        if early_exit and (best_bound > 0.0 or best_primal < 0.0):
            break
        if t == iters:
            break

        # Adam ascent step with linear decay to 10% of the base rate.
        decay = 1.0 - 0.9 * (t / max(iters, 1))
        state.step += 1
        bc1 = 1.0 - ADAM_BETA1 ** state.step
        bc2 = 1.0 - ADAM_BETA2 ** state.step
        for rid, pset in work.items():
            g = res.grads.get(rid) if res.grads else None
            if g is None:
                continue
            state.ensure(rid, pset)
            ms, vs = state.m[rid], state.v[rid]
            arrays = (pset.alpha, pset.beta, pset.gamma)
            lrs = (lr_alpha * decay, lr_beta * decay, lr_gamma * decay)
            for arr, grad, m_acc, v_acc, lr in zip(arrays, g, ms, vs, lrs):
                if arr.size == 0:
                    continue
                m_acc *= ADAM_BETA1
                m_acc += (1.0 - ADAM_BETA1) * grad
                v_acc *= ADAM_BETA2
                v_acc += (1.0 - ADAM_BETA2) * grad * grad
                arr += lr * (m_acc / bc1) / (np.sqrt(v_acc / bc2) + ADAM_EPS)
            np.clip(pset.alpha, 0.0, 1.0, out=pset.alpha)
            np.maximum(pset.beta, 0.0, out=pset.beta)
            np.maximum(pset.gamma, 0.0, out=pset.gamma)

    if best_params is None:  # iters < 0 guard; never hit in normal use
        best_params = work
        best_vec = np.array([-np.inf])
    return OptResult(
        bound=best_bound,
        bound_vec=best_vec,
        params=best_params,
        a_prime=best_a_prime,
        primal=best_primal,
        primal_x=best_x,
        iterations=steps_run,
    )
