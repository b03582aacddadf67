"""Symbolic bound propagation with optimizable dual parameters.

The engine rewrites linear expressions over a layer's values as sound
linear expressions over the previous layer's values, recursively down to
the network input, then concretizes over the input region.  A ReLU layer
is crossed in three steps: fold multi-neuron constraint rows into the
expression with multipliers gamma >= 0, replace post-activations by a
parametrized single-neuron relaxation (slopes collected in a diagonal D
with intercepts b), and fold split constraints with multipliers
beta >= 0.  For a lower-bound query the combined step is

    a_hat = (a + gamma.P) D + beta.S + gamma.Phat
    c_hat = (a + gamma.P) b  - gamma.p + c

with all gamma/beta terms sign-flipped for upper-bound queries.  Bounds
are sound for any alpha in [0,1] and beta, gamma >= 0, which is what
makes them optimizable.

Every forward pass can record a tape; the backward pass over the tape
yields exact gradients of the concretized bound with respect to every
alpha, beta and gamma entry, with per-neuron case selections and the
concretization sign pattern held fixed at their evaluated values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .model import Affine, Layer, Network, ReLU, ResidualAdd, VerificationProblem


class ParameterDomainError(ValueError):
    """A dual parameter left its projection domain."""


class InfeasibleSubproblemError(RuntimeError):
    """Split constraints contradict the region (empty subdomain)."""


# -- parameters ------------------------------------------------------------


@dataclass
class ParamSet:
    """Dual parameters of one ReLU layer for one query group.

    alpha entries exist only for unstable, unsplit neurons; beta entries
    only for split neurons; gamma has one entry per multi-neuron
    constraint row of the layer.
    """

    alpha_idx: np.ndarray
    alpha: np.ndarray
    beta_idx: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def validate(self) -> None:
        if self.alpha.size and (self.alpha.min() < 0.0 or self.alpha.max() > 1.0):
            raise ParameterDomainError("alpha outside [0, 1]")
        if self.beta.size and self.beta.min() < 0.0:
            raise ParameterDomainError("negative beta")
        if self.gamma.size and self.gamma.min() < 0.0:
            raise ParameterDomainError("negative gamma")

    def copy(self) -> "ParamSet":
        return ParamSet(
            self.alpha_idx.copy(), self.alpha.copy(),
            self.beta_idx.copy(), self.beta.copy(), self.gamma.copy(),
        )


def default_alpha(l: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Minimal-area slope choice for the lower relaxation: 1 when u >= -l."""
    return (u >= -l).astype(np.float64)


# -- expressions -----------------------------------------------------------


@dataclass
class LinearExpression:
    """Batched symbolic bound a @ z + c over some layer's values.

    For a lower-side query each row claims `min over the region of
    a_r . z + c_r` bounds the query from below; upper-side dually.
    """

    a: np.ndarray  # (q, width)
    c: np.ndarray  # (q,)

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if self.a.shape[0] != self.c.shape[0]:
            raise ValueError("one offset per expression row required")

    @staticmethod
    def identity(width: int) -> "LinearExpression":
        return LinearExpression(np.eye(width), np.zeros(width))


@dataclass
class BoundContext:
    """Everything a query needs to cross ReLU layers: cached pre-activation
    bounds, split assignments, multi-neuron rows and dual parameters."""

    bounds: Mapping[int, Tuple[np.ndarray, np.ndarray]]
    splits: Optional[Mapping[int, np.ndarray]] = None
    mnc: Optional[Mapping[int, Tuple[np.ndarray, np.ndarray, np.ndarray]]] = None
    params: Optional[Mapping[int, ParamSet]] = None
    side: str = "lower"

    def split_vec(self, rid: int, width: int) -> np.ndarray:
        if self.splits is None or rid not in self.splits:
            return _ZERO_SPLITS.setdefault(width, np.zeros(width, dtype=np.int8))
        return self.splits[rid]

    def pset(self, rid: int) -> Optional[ParamSet]:
        if self.params is None:
            return None
        return self.params.get(rid)

    def mnc_rows(self, rid: int):
        if self.mnc is None:
            return None
        rows = self.mnc.get(rid)
        if rows is None or rows[2].size == 0:
            return None
        return rows


_ZERO_SPLITS: Dict[int, np.ndarray] = {}


# -- tape records -----------------------------------------------------------


@dataclass
class _AffineRec:
    layer: Affine


@dataclass
class _ReluRec:
    rid: int
    a1: np.ndarray
    D: np.ndarray
    B: np.ndarray
    alpha_case: np.ndarray  # rows x neurons where D reads alpha
    s: np.ndarray
    sigma: float
    pset: Optional[ParamSet]
    mnc: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class _ResidualRec:
    branch_tape: list


# -- forward ---------------------------------------------------------------


def _neuron_status(l: np.ndarray, u: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Per-neuron case: 1 slope-one (active/positive split), 0 slope-zero
    (inactive/negative split), 2 unstable and unsplit."""
    stat = np.full(l.shape[0], 2, dtype=np.int8)
    zero = (s == 0) & (u <= 0.0)
    one = (s == 0) & ~zero & (l >= 0.0)
    stat[zero] = 0
    stat[one] = 1
    stat[s == -1] = 1
    stat[s == 1] = 0
    return stat


def _relu_step(a, c, rid, ctx: BoundContext, tape, a_prime_out):
    l, u = ctx.bounds[rid]
    width = l.shape[0]
    s = ctx.split_vec(rid, width)
    pset = ctx.pset(rid)
    if pset is not None:
        pset.validate()
    mnc = ctx.mnc_rows(rid)
    sigma = 1.0 if ctx.side == "lower" else -1.0

    if mnc is not None and pset is not None and pset.gamma.size:
        P, Ph, p = mnc
        gP = pset.gamma @ P
        a1 = a + sigma * gP
        c = c - sigma * float(pset.gamma @ p)
    else:
        mnc = None
        a1 = a

    if a_prime_out is not None:
        a_prime_out[rid] = a1

    stat = _neuron_status(l, u, s)
    unstable = stat == 2
    denom = np.where(unstable, u - l, 1.0)
    slope_up = np.where(unstable, u / denom, 0.0)
    icpt_up = np.where(unstable, -u * l / denom, 0.0)

    alpha_full = default_alpha(l, u)
    if pset is not None and pset.alpha.size:
        alpha_full = alpha_full.copy()
        alpha_full[pset.alpha_idx] = pset.alpha

    # Lower side: a negative coefficient consumes the upper relaxation.
    gate = (a1 < 0.0) if ctx.side == "lower" else (a1 >= 0.0)
    gate = gate & unstable[None, :]
    base = (stat == 1).astype(np.float64)[None, :]
    D = np.where(unstable[None, :], np.where(gate, slope_up[None, :], alpha_full[None, :]), base)
    B = np.where(gate, icpt_up[None, :], 0.0)

    a_hat = a1 * D
    c_hat = c + (a1 * B).sum(axis=1)
    if pset is not None and pset.beta.size:
        beta_term = np.zeros(width)
        beta_term[pset.beta_idx] = pset.beta * s[pset.beta_idx]
        a_hat = a_hat + sigma * beta_term
    if mnc is not None:
        a_hat = a_hat + sigma * (pset.gamma @ mnc[1])

    if tape is not None:
        alpha_case = unstable[None, :] & ~gate
        tape.append(_ReluRec(rid, a1, D, B, alpha_case, s, sigma, pset, mnc))
    return a_hat, c_hat


def _backsub_chain(a, c, chain: Sequence[Layer], start: int, ctx: BoundContext, tape, a_prime_out):
    for idx in range(start, -1, -1):
        layer = chain[idx]
        if isinstance(layer, Affine):
            c = c + a @ layer.b
            a = a @ layer.W
            if tape is not None:
                tape.append(_AffineRec(layer))
        elif isinstance(layer, ReLU):
            a, c = _relu_step(a, c, layer.relu_id, ctx, tape, a_prime_out)
        else:
            branch_tape = [] if tape is not None else None
            a_branch, c = _backsub_chain(
                a, c, layer.branch, len(layer.branch) - 1, ctx, branch_tape, a_prime_out
            )
            if tape is not None:
                tape.append(_ResidualRec(branch_tape))
            a = a + a_branch
    return a, c


def backsubstitute(
    expr: LinearExpression,
    frames: Sequence[Tuple[List[Layer], int]],
    ctx: BoundContext,
    want_tape: bool = False,
    a_prime_out: Optional[dict] = None,
):
    """Rewrite `expr` (over the output of frames[0]) as an expression over
    the network input.  Returns (input expression, tape)."""
    a, c = expr.a, expr.c
    tape: Optional[list] = [] if want_tape else None
    for chain, start in frames:
        a, c = _backsub_chain(a, c, chain, start, ctx, tape, a_prime_out)
    return LinearExpression(a, c), tape


# -- concretization ---------------------------------------------------------


def concretize(
    expr: LinearExpression,
    problem: VerificationProblem,
    side: str = "lower",
    want_grad: bool = False,
):
    """Closed-form bound of the input expression over the region.

    p = inf uses the exact minimum over the (clip-intersected) box; p = 2
    and p = 1 use the dual-norm form over the ball, which stays sound when
    a clip box shrinks the region further.
    """
    a, c = expr.a, expr.c
    lower = side == "lower"
    if problem.p == np.inf:
        lo, hi = problem.input_box()
        w = np.where(a >= 0.0, lo, hi) if lower else np.where(a >= 0.0, hi, lo)
        vals = (a * w).sum(axis=1) + c
        grad = w
    elif problem.p == 2.0:
        norms = np.linalg.norm(a, axis=1)
        vals = a @ problem.x0 + (-1.0 if lower else 1.0) * problem.eps * norms + c
        if want_grad:
            safe = np.where(norms > 0.0, norms, 1.0)
            unit = a / safe[:, None]
            grad = problem.x0[None, :] + (-1.0 if lower else 1.0) * problem.eps * unit
        else:
            grad = None
    else:  # p == 1, dual norm is max
        jmax = np.argmax(np.abs(a), axis=1)
        amax = np.abs(a[np.arange(a.shape[0]), jmax])
        vals = a @ problem.x0 + (-1.0 if lower else 1.0) * problem.eps * amax + c
        if want_grad:
            grad = np.tile(problem.x0, (a.shape[0], 1))
            sgn = np.sign(a[np.arange(a.shape[0]), jmax])
            grad[np.arange(a.shape[0]), jmax] += (-1.0 if lower else 1.0) * problem.eps * sgn
        else:
            grad = None
    return (vals, grad) if want_grad else (vals, None)


# -- backward ---------------------------------------------------------------


@dataclass
class ParamGrads:
    """Gradients of the summed bound per ReLU layer, shaped like ParamSet."""

    by_layer: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)

    def get(self, rid: int):
        return self.by_layer.get(rid)


def _backward_tape(tape: list, G: np.ndarray, grads: ParamGrads) -> np.ndarray:
    for rec in reversed(tape):
        if isinstance(rec, _AffineRec):
            G = G @ rec.layer.W.T + rec.layer.b[None, :]
        elif isinstance(rec, _ReluRec):
            GA1 = G * rec.D + rec.B  # gradient through a_hat and through c_hat
            pset = rec.pset
            if pset is not None:
                g_alpha = np.zeros_like(pset.alpha)
                if pset.alpha.size:
                    contrib = np.where(rec.alpha_case, G * rec.a1, 0.0).sum(axis=0)
                    g_alpha = contrib[pset.alpha_idx]
                g_beta = np.zeros_like(pset.beta)
                if pset.beta.size:
                    g_beta = rec.sigma * rec.s[pset.beta_idx] * G.sum(axis=0)[pset.beta_idx]
                g_gamma = np.zeros_like(pset.gamma)
                if rec.mnc is not None:
                    P, Ph, p = rec.mnc
                    q = G.shape[0]
                    g_gamma = rec.sigma * (P @ GA1.sum(axis=0) + Ph @ G.sum(axis=0) - q * p)
                prev = grads.by_layer.get(rec.rid)
                if prev is None:
                    grads.by_layer[rec.rid] = (g_alpha, g_beta, g_gamma)
                else:
                    grads.by_layer[rec.rid] = (prev[0] + g_alpha, prev[1] + g_beta, prev[2] + g_gamma)
            G = GA1
        else:
            G = G + _backward_tape(rec.branch_tape, G, grads)
    return G


# -- full queries -----------------------------------------------------------


@dataclass
class BoundResult:
    bound: np.ndarray
    expr0: LinearExpression
    grads: Optional[ParamGrads] = None
    a_prime: Optional[Dict[int, np.ndarray]] = None


def bound_query(
    expr: LinearExpression,
    frames: Sequence[Tuple[List[Layer], int]],
    problem: VerificationProblem,
    ctx: BoundContext,
    want_grad: bool = False,
    want_a_prime: bool = False,
) -> BoundResult:
    """Backsubstitute a query to the input and concretize; optionally
    return gradients of the summed bound w.r.t. all dual parameters."""
    a_prime: Optional[dict] = {} if want_a_prime else None
    expr0, tape = backsubstitute(expr, frames, ctx, want_tape=want_grad, a_prime_out=a_prime)
    vals, grad_seed = concretize(expr0, problem, ctx.side, want_grad=want_grad)
    grads = None
    if want_grad:
        grads = ParamGrads()
        _backward_tape(tape, grad_seed, grads)
    return BoundResult(vals, expr0, grads, a_prime)


# Spec-level single-layer operations (thin wrappers over the engine).


def backsub_affine(expr: LinearExpression, layer: Affine) -> LinearExpression:
    c = expr.c + expr.a @ layer.b
    return LinearExpression(expr.a @ layer.W, c)


def backsub_relu(
    expr: LinearExpression,
    bounds: Tuple[np.ndarray, np.ndarray],
    splits: Optional[np.ndarray],
    mnc_rows,
    pset: Optional[ParamSet],
    side: str = "lower",
    relu_id: int = 0,
) -> LinearExpression:
    ctx = BoundContext(
        bounds={relu_id: bounds},
        splits=None if splits is None else {relu_id: splits},
        mnc=None if mnc_rows is None else {relu_id: mnc_rows},
        params=None if pset is None else {relu_id: pset},
        side=side,
    )
    a, c = _relu_step(expr.a, expr.c, relu_id, ctx, None, None)
    return LinearExpression(a, c)


def backsub_residual(expr: LinearExpression, block: ResidualAdd, ctx: BoundContext) -> LinearExpression:
    a_branch, c = _backsub_chain(
        expr.a, expr.c, block.branch, len(block.branch) - 1, ctx, None, None
    )
    return LinearExpression(expr.a + a_branch, c)


# -- intermediate bounds -----------------------------------------------------


def interval_bounds(
    net: Network,
    problem: VerificationProblem,
    splits: Optional[Mapping[int, np.ndarray]] = None,
) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Cheap pre-activation boxes from interval propagation (never tighter
    than backsubstitution, used as the fast path for intermediate bounds)."""
    out: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    lo, hi = problem.input_box()
    _interval_chain(net.layers, lo, hi, splits, out)
    return out


def _interval_chain(chain, lo, hi, splits, out):
    for layer in chain:
        if isinstance(layer, Affine):
            Wp = np.maximum(layer.W, 0.0)
            Wn = np.minimum(layer.W, 0.0)
            lo, hi = Wp @ lo + Wn @ hi + layer.b, Wp @ hi + Wn @ lo + layer.b
        elif isinstance(layer, ReLU):
            lo, hi = _clamp_split(lo, hi, layer.relu_id, splits)
            out[layer.relu_id] = (lo.copy(), hi.copy())
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        else:
            blo, bhi = _interval_chain(layer.branch, lo, hi, splits, out)
            lo, hi = lo + blo, hi + bhi
    return lo, hi


def _clamp_split(lo, hi, rid, splits):
    if splits is not None and rid in splits:
        s = splits[rid]
        lo = np.where(s == -1, np.maximum(lo, 0.0), lo)
        hi = np.where(s == 1, np.minimum(hi, 0.0), hi)
    return lo, hi


def compute_bounds(
    net: Network,
    problem: VerificationProblem,
    splits: Optional[Mapping[int, np.ndarray]] = None,
    mnc=None,
    params_for=None,
    up_to_relu: Optional[int] = None,
    method: str = "backsub",
    cache: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None,
    stale: Optional[set] = None,
) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Sound pre-activation bounds for every ReLU layer, in dependency
    order; later layers consume earlier results.

    `cache` entries not marked `stale` are kept as-is.  Split clamps are
    applied to every recomputed layer; contradictory clamps (an empty
    subdomain) raise InfeasibleSubproblemError.  `params_for(rid, side)`
    may supply optimized parameter sets per bound query; the default is
    the unoptimized minimal-area relaxation.

    Backsubstituted bounds are met with the interval-propagated box
    (both are sound, so their intersection is, and the slope heuristic
    alone does not dominate interval propagation entrywise).
    """
    ivals = interval_bounds(net, problem, splits)
    if method == "interval":
        _check_feasible(ivals)
        return ivals

    out: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for site in net.relu_sites:
        rid = site.relu_id
        if up_to_relu is not None and rid > up_to_relu:
            break
        if cache is not None and rid in cache and (stale is None or rid not in stale):
            out[rid] = cache[rid]
            continue
        q = LinearExpression.identity(site.width)
        sides = {}
        for side in ("lower", "upper"):
            ctx = BoundContext(
                bounds=out,
                splits=splits,
                mnc=mnc,
                params=None if params_for is None else params_for(rid, side),
                side=side,
            )
            expr0, _ = backsubstitute(q, site.frames, ctx)
            sides[side], _ = concretize(expr0, problem, side)
        l = np.maximum(sides["lower"], ivals[rid][0])
        u = np.minimum(sides["upper"], ivals[rid][1])
        if splits is not None and rid in splits:
            s = splits[rid]
            l = np.where(s == -1, np.maximum(l, 0.0), l)
            u = np.where(s == 1, np.minimum(u, 0.0), u)
        out[rid] = (l, u)
        _check_feasible({rid: out[rid]})
    return out


def _check_feasible(bounds) -> None:
    for rid, (l, u) in bounds.items():
        if (l > u + 1e-12).any():
            raise InfeasibleSubproblemError(f"empty subdomain at ReLU layer {rid}")


# -- primal side -------------------------------------------------------------


def primal_upper_bound(
    expr0: LinearExpression,
    problem: VerificationProblem,
    row: int = 0,
) -> Tuple[float, np.ndarray]:
    """Evaluate the property network at the input minimizing the given
    lower-bound expression row; any region point yields a valid upper
    bound on the true minimum."""
    a0 = expr0.a[row]
    if problem.p == np.inf:
        x = np.where(a0 < 0.0, problem.x0 + problem.eps, problem.x0 - problem.eps)
    elif problem.p == 2.0:
        n = np.linalg.norm(a0)
        x = problem.x0 - problem.eps * a0 / n if n > 0 else problem.x0.copy()
    else:
        x = problem.x0.copy()
        if np.abs(a0).max(initial=0.0) > 0:
            j = int(np.argmax(np.abs(a0)))
            x[j] -= problem.eps * np.sign(a0[j])
    if problem.clip is not None:
        x = np.clip(x, problem.clip[0], problem.clip[1])
    margins = problem.encoded_network().forward(x)
    return float(margins.min()), x
