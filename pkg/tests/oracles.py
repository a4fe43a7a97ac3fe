"""Reference computations written against plain numpy, independent of the autodiff core."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_valid(x, k, b):
    # x (n, c, H, W), k (q, c, r, r)
    win = sliding_window_view(x, k.shape[-2:], axis=(2, 3))  # (n, c, H', W', r, r)
    return np.einsum("nchwij,qcij->nqhw", win, k) + b[None, :, None, None]


def maxpool(x):
    n, c, H, W = x.shape
    x = x[:, :, :H // 2 * 2, :W // 2 * 2]
    return x.reshape(n, c, H // 2, 2, W // 2, 2).max(axis=(3, 5))


def features(x, conv, center):
    h = x - center
    for k, b in conv:
        h = maxpool(np.maximum(conv_valid(h, k, b), 0))
    return h.reshape(h.shape[0], -1)


def softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def xent(target, q):
    return -(target * np.log(np.maximum(q, 1e-12))).sum(axis=-1)


def bag_head(h, p):
    hp = np.maximum(h @ p["fc_W"] + p["fc_b"], 0)
    a = softmax(np.tanh(hp @ p["V"].T) @ p["w"])
    z = a @ hp
    return softmax(z @ p["cls_W"] + p["cls_b"]), a


def domain_probs(h, p):
    return softmax(np.maximum(h @ p["hid_W"] + p["hid_b"], 0) @ p["out_W"] + p["out_b"])


def losses(x, y, d, params, center, beta=None):
    """(L_bag, L_d, L'_d, beta) from a dict of named arrays using the f/, y/, d/ prefixes."""
    n_conv = sum(1 for k in params if k.startswith("f/") and k.endswith(".W"))
    conv = [(params[f"f/conv{i}.W"], params[f"f/conv{i}.b"]) for i in range(1, n_conv + 1)]
    head = {k[2:]: v for k, v in params.items() if k.startswith("y/")}
    dom = {k[2:]: v for k, v in params.items() if k.startswith("d/")}
    h = features(x, conv, center)
    probs, a = bag_head(h, head)
    if beta is None:
        beta = a.max() - a
    ce = xent(np.broadcast_to(d, (len(h), len(d))), domain_probs(h, dom))
    return float(xent(y, probs)), float(ce.mean()), float((beta * ce).mean()), beta


def fd_grad(fun, params, name, step=1e-5):
    base = params[name]
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        g[idx] = (fun({**params, name: plus}) - fun({**params, name: minus})) / (2 * step)
    return g


def stage1_update(x, y, d, params, center, lam, lr):
    """Expected parameters after one stage-1 step from zero velocity.

    theta_y <- theta_y - lr dL_bag; theta_d <- theta_d - lr lam dL_d;
    theta_f <- theta_f - lr (dL_bag - lam dL'_d), with beta held at its
    current value.
    """
    beta = losses(x, y, d, params, center)[3]
    out = {}
    for name, value in params.items():
        group = name.split("/", 1)[0]
        if group == "y":
            g = fd_grad(lambda p: losses(x, y, d, p, center, beta)[0], params, name)
        elif group == "d":
            g = lam * fd_grad(lambda p: losses(x, y, d, p, center, beta)[1], params, name)
        else:
            g = fd_grad(lambda p: losses(x, y, d, p, center, beta)[0]
                        - lam * losses(x, y, d, p, center, beta)[2], params, name)
        out[name] = value - lr * g
    return out


def slide_probability(bag_probs):
    """Brute-force geometric-mean vote over (P0, P1) vectors via explicit log sums."""
    s1 = s0 = 0.0
    for p0, p1 in bag_probs:
        s1 += math.log(max(float(p1), 1e-12))
        s0 += math.log(max(float(p0), 1e-12))
    g1, g0 = math.exp(s1 / len(bag_probs)), math.exp(s0 / len(bag_probs))
    return g1 / (g1 + g0)


def micro_stage1_case(seed=0, n_instances=2, lam=0.6, lr=0.05):
    """One stage-1 step on a 2-domain, 8-feature micro-model versus the finite-difference oracle.

    Returns the largest per-tensor relative error ||actual - expected|| / ||expected - before||
    measured on the parameter updates.
    """
    from msdamil import model as M
    from msdamil.data import Bag
    from msdamil.train import OptimizerState, _named, stage1_step

    rng = np.random.default_rng(seed)
    f = M.init_extractor(rng, widths=(2, 8), patch_size=12, dtype=np.float64)
    assert f.feature_dim == 8
    yh = M.init_bag_predictor(rng, 8, fc_dim=6, attn_hidden=4, dtype=np.float64)
    dh = M.init_domain_predictor(rng, 8, 2, hidden=5, dtype=np.float64)
    yh.fc_b.data[:] = 0.5  # keep relu units away from their kink
    dh.hid_b.data[:] = 0.5
    pixels = rng.integers(0, 256, (n_instances, 3, 12, 12), dtype=np.uint8)
    bag = Bag("s/bag000", "s", 1, np.arange(n_instances), np.zeros((n_instances, 2), int),
              np.zeros(n_instances, bool), {1: pixels})
    y, d = np.array([0.0, 1.0]), np.array([1.0, 0.0])
    named = {**_named("f", f), **_named("y", yh), **_named("d", dh)}
    before = {k: t.data.copy() for k, t in named.items()}
    expected = stage1_update(bag.patches(1, np.float64), y, d, before, f.input_center, lam, lr)
    stage1_step(bag, 1, y, d, f, yh, dh, lam, OptimizerState(), lr, 0.9)
    worst = 0.0
    for k, t in named.items():
        delta = expected[k] - before[k]
        scale = np.linalg.norm(delta)
        err = np.linalg.norm(t.data - expected[k])
        worst = max(worst, err / scale if scale > 0 else err)
    return worst
