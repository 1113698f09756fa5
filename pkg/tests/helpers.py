"""Shared oracles for the test suite: finite differences and brute force."""

import itertools

import numpy as np

from setvae import tensor as T


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x (f64 only)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        step = h * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def check_op_grad(op, shapes, rng, arrays=None, **kwargs) -> float:
    """Max rel err of op's backward vs finite differences.

    `op` maps tensors to a tensor; the loss is a fixed random projection of
    the output so nonuniform cotangents reach every VJP. Pass `arrays` for
    ops whose inputs need a restricted support (positive, off-kink, ...).
    """
    arrs = arrays if arrays is not None else [rng.standard_normal(s) for s in shapes]
    leaves = [T.parameter(a.copy(), f"arg{i}") for i, a in enumerate(arrs)]
    out = op(*leaves, **kwargs)
    w = rng.standard_normal(out.shape)
    T.sum_all(T.mul(out, T.as_tensor(w))).backward()

    worst = 0.0
    for i, a in enumerate(arrs):
        def f(x, i=i):
            args = [T.as_tensor(v) for v in arrs]
            args[i] = T.as_tensor(x)
            return float(np.sum(op(*args, **kwargs).data * w))

        worst = max(worst, rel_err(leaves[i].grad, numeric_grad(f, a)))
    return worst


def brute_force_assignment(cost: np.ndarray) -> tuple[float, tuple]:
    """Exact minimum-cost assignment by enumerating all n! permutations."""
    n = cost.shape[0]
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        c = sum(cost[i, perm[i]] for i in range(n))
        if c < best:
            best, best_perm = c, perm
    return float(best), best_perm


def chamfer_loops(x: np.ndarray, y: np.ndarray) -> float:
    """Double-loop Chamfer oracle: two-way squared nearest neighbors."""
    total = 0.0
    for p in x:
        total += min(float(np.sum((p - q) ** 2)) for q in y)
    for q in y:
        total += min(float(np.sum((q - p) ** 2)) for p in x)
    return total
