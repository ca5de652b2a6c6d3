"""Shared finite-difference oracles for gradient and JVP checks."""

import numpy as np


def rel_err(got, want, floor=1e-8):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom))


def fd_grad(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def fd_directional(f, xs, ts, eps=1e-5):
    """Central finite difference of f(xs) along direction ts (lists of arrays)."""
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    ts = [np.asarray(t, dtype=np.float64) for t in ts]
    hi = f(*[x + eps * t for x, t in zip(xs, ts)])
    lo = f(*[x - eps * t for x, t in zip(xs, ts)])
    return (np.asarray(hi) - np.asarray(lo)) / (2.0 * eps)
