"""Finite-difference gradient oracle shared by the gradient tests."""

import math

import numpy as np

H = 1e-4


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-10:  # both (numerically) zero, e.g. a shift-invariant bias
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / denom)


def fd_check(f, params: dict, grads: dict, rng, coords_per_param=8):
    """Worst relative error between ``grads`` and central differences of ``f``.

    ``f(params)`` returns the scalar loss; only a random sample of coordinates
    of each parameter is probed.
    """
    worst = 0.0
    for name, g in grads.items():
        p = params[name]
        flat = p.reshape(-1)
        k = min(coords_per_param, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        num = np.empty(k)
        for n, j in enumerate(idx):
            old = flat[j]
            flat[j] = old + H
            up = f(params)
            flat[j] = old - H
            down = f(params)
            flat[j] = old
            num[n] = (up - down) / (2 * H)
        worst = max(worst, rel_error(np.ravel(g)[idx], num))
    return worst


def brute_force_append(rec_list, X, K2, exclude=()) -> list:
    """Items appended by augmentation, straight from the definition.

    res is the exactly rounded mean of the Euclidean distances; two res values
    equal to 12 significant digits (relative to the largest) are a tie, broken
    by the smaller index.
    """
    scored = []
    for c in range(len(X)):
        if c in rec_list or c in exclude:
            continue
        dist = [math.sqrt(math.fsum((float(p) - float(q)) ** 2 for p, q in zip(X[c], X[a]))) for a in rec_list]
        scored.append((math.fsum(dist) / len(rec_list), c))
    scale = max((abs(r) for r, _ in scored), default=1.0) or 1.0
    scored.sort(key=lambda rc: (round(rc[0] / scale, 12), rc[1]))
    return [c for _, c in scored[: K2 - len(rec_list)]]
