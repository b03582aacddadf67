import numpy as np

from mnbab.config import RunConfig
from mnbab.falsify import margin_and_grad, pgd_attack
from mnbab.model import Affine, Network, ReLU, VerificationProblem
from mnbab.oracle import exact_verdict

from reference import random_mlp


def test_misclassified_center_found_immediately():
    rng = np.random.default_rng(0)
    net = random_mlp(rng, [2, 4, 3])
    x0 = rng.normal(size=2)
    out = net.forward(x0)
    wrong = int(np.argmin(out))
    rows = []
    for j in range(3):
        if j != wrong:
            r = np.zeros(3)
            r[wrong], r[j] = 1.0, -1.0
            rows.append(r)
    prob = VerificationProblem(net, x0, 0.0, np.inf, np.array(rows), np.zeros(2))
    w = pgd_attack(prob, RunConfig(attack_steps=0, attack_restarts=1))
    assert w is not None
    assert np.allclose(w, x0)


def _planted_two_piece():
    # f(x) = relu(x1) - relu(-x1): sign classifier in one dimension.
    # property: output > 0; center at 0.3 with eps 0.5 reaches x1 < 0.
    net = Network(
        [
            Affine(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2)),
            ReLU(2),
            Affine(np.array([[1.0, -1.0]]), np.array([0.0])),
        ],
        2,
    )
    return VerificationProblem(
        net, np.array([0.3, 0.0]), 0.5, np.inf, np.array([[1.0]]), np.zeros(1)
    )


def test_planted_counterexample_found():
    prob = _planted_two_piece()
    w = pgd_attack(prob, RunConfig(seed=0))
    assert w is not None
    assert prob.encoded_network().forward(w).min() <= 0.0
    status, _, _ = exact_verdict(prob)
    assert status == "falsified"


def test_witness_always_in_region_and_violating():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = random_mlp(rng, [2, 5, 3])
        x0 = rng.uniform(-1, 1, 2)
        label = int(np.argmax(net.forward(x0)))
        rows = []
        for j in range(3):
            if j != label:
                r = np.zeros(3)
                r[label], r[j] = 1.0, -1.0
                rows.append(r)
        p = float(rng.choice([np.inf, 2.0, 1.0]))
        prob = VerificationProblem(net, x0, float(rng.uniform(0.1, 1.0)), p, np.array(rows), np.zeros(2), clip=(-2, 2))
        w = pgd_attack(prob, RunConfig(seed=seed))
        if w is not None:
            assert prob.contains(w, tol=1e-12)
            assert prob.encoded_network().forward(w).min() <= 0.0


def test_margin_grad_matches_fd():
    rng = np.random.default_rng(3)
    net = random_mlp(rng, [3, 6, 4, 2])
    enc = VerificationProblem(
        net, np.zeros(3), 1.0, np.inf, np.array([[1.0, -1.0]]), np.zeros(1)
    ).encoded_network()
    h = 1e-7
    checked = 0
    while checked < 20:
        x = rng.normal(size=3)
        m, g = margin_and_grad(enc, x)
        # skip kinks
        pre = x
        skip = False
        for layer in enc.layers:
            if isinstance(layer, Affine):
                pre = layer.W @ pre + layer.b
            elif isinstance(layer, ReLU):
                if np.abs(pre).min() < 1e-4:
                    skip = True
                pre = np.maximum(pre, 0.0)
        if skip:
            continue
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (margin_and_grad(enc, x + e)[0] - margin_and_grad(enc, x - e)[0]) / (2 * h)
            assert abs(fd - g[i]) < 1e-5 * max(1.0, abs(fd))
        checked += 1
