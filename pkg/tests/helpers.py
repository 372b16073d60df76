"""Shared finite-difference helpers for loss-gradient oracles."""

import numpy as np

from fieldprint.fields import siren_init


def small_net(seed=0, sizes=(3, 8, 8, 1), omega0=7.0, final_bias=None):
    return siren_init(sizes, omega0=omega0, rng=seed, final_bias=final_bias)


def fd_param_grad(loss_fn, params, h=1e-6):
    """Central differences over every scalar parameter."""
    vec = params.ravel()
    g = np.zeros_like(vec)
    for i in range(vec.size):
        vp = vec.copy()
        vp[i] += h
        vm = vec.copy()
        vm[i] -= h
        g[i] = (loss_fn(params.with_ravel(vp)) - loss_fn(params.with_ravel(vm))) / (2 * h)
    return g


def pack_grads(gw, gb):
    parts = []
    for w, b in zip(gw, gb):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def rel_err(got, ref):
    scale = max(1.0, np.abs(ref).max())
    return np.abs(got - ref).max() / scale
