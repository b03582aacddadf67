"""Adversarial falsification: projected gradient descent on the minimum
property margin.  A returned witness is always re-verified by exact
forward evaluation, so the attack can never produce a false
counterexample."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .config import RunConfig
from .model import Affine, Network, ReLU, VerificationProblem


def margin_and_grad(net: Network, x: np.ndarray):
    """Minimum output margin and its subgradient w.r.t. the input (ReLU
    subgradient 0 at the kink; ties on the minimum row break low)."""
    acts = []
    z = x

    def fwd(chain, z):
        for layer in chain:
            if isinstance(layer, Affine):
                z = layer.W @ z + layer.b
            elif isinstance(layer, ReLU):
                acts.append(z > 0.0)
                z = np.maximum(z, 0.0)
            else:
                z = z + fwd(layer.branch, z)
        return z

    out = fwd(net.layers, z)
    row = int(np.argmin(out))
    g = np.zeros_like(out)
    g[row] = 1.0
    cursor = [len(acts)]

    def bwd(chain, g):
        for layer in reversed(chain):
            if isinstance(layer, Affine):
                g = layer.W.T @ g
            elif isinstance(layer, ReLU):
                cursor[0] -= 1
                g = g * acts[cursor[0]]
            else:
                g = g + bwd(layer.branch, g)
        return g

    return float(out[row]), bwd(net.layers, g)


def _step_direction(g: np.ndarray, p: float) -> np.ndarray:
    if p == np.inf:
        return np.sign(g)
    if p == 2.0:
        n = np.linalg.norm(g)
        return g / n if n > 0 else g
    d = np.zeros_like(g)
    if np.abs(g).max(initial=0.0) > 0:
        j = int(np.argmax(np.abs(g)))
        d[j] = np.sign(g[j])
    return d


def pgd_attack(
    problem: VerificationProblem,
    config: Optional[RunConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> Optional[np.ndarray]:
    """Search the region for an input with some property margin <= 0.
    The center starts the first restart, so a violation at x0 is found at
    step zero.  Returns the witness or None."""
    config = config or RunConfig()
    rng = rng or np.random.default_rng(config.seed)
    net = problem.encoded_network()
    eps = problem.eps
    lo, hi = problem.input_box()
    step = 2.5 * max(eps, 1e-12) / max(config.attack_steps, 1)

    for restart in range(max(config.attack_restarts, 1)):
        if restart == 0:
            x = problem.project(problem.x0.copy())
        else:
            x = problem.project(rng.uniform(lo, hi))
        for _ in range(config.attack_steps + 1):
            m, g = margin_and_grad(net, x)
            if m <= 0.0:
                if problem.contains(x) and float(net.forward(x).min()) <= 0.0:
                    return x
            x = problem.project(x - step * _step_direction(g, problem.p))
        m, _ = margin_and_grad(net, x)
        if m <= 0.0 and problem.contains(x) and float(net.forward(x).min()) <= 0.0:
            return x
    return None
