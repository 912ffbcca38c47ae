"""Shared test helpers: finite-difference oracles and tiny random nets."""

import numpy as np
import pytest

from flowcache import autodiff as ad


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def fd_directional(f, xs, ds, h=1e-5):
    """Central-difference directional derivative of f along ds (any output shape)."""
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    ds = [np.asarray(d, dtype=np.float64) for d in ds]
    plus = f(*[x + h * d for x, d in zip(xs, ds)])
    minus = f(*[x - h * d for x, d in zip(xs, ds)])
    return (np.asarray(plus) - np.asarray(minus)) / (2.0 * h)


def tiny_mlp_params(rng, d_in=3, d_hidden=5, d_out=2):
    scale = 0.7
    return ad.ParameterSet({
        "w1": scale * rng.standard_normal((d_in, d_hidden)),
        "b1": scale * rng.standard_normal(d_hidden),
        "w2": scale * rng.standard_normal((d_hidden, d_out)),
        "b2": scale * rng.standard_normal(d_out),
    })


def tiny_mlp_forward(p, x, act=ad.tanh):
    h = act(ad.affine(x, p["w1"], p["b1"]))
    return ad.affine(h, p["w2"], p["b2"])


def tiny_mlp_loss(p, x, target):
    y = tiny_mlp_forward(p, x)
    return ad.mean(ad.sum_(ad.square(ad.sub(y, target)), axis=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
