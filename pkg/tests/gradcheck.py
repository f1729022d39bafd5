"""Finite-difference checks shared by the unit and acceptance suites.

Every check runs at float64 and returns the worst relative error seen.
"""

from __future__ import annotations

import numpy as np

from c2gnet.nn import layers as L
from c2gnet.nn.network import build_deeplnino, forward, init_params, loss_and_grads

from oracles import numeric_grad, rel_error

H = 1e-5


def _sample(arr, rng, k):
    n = arr.size
    return np.arange(n) if n <= k else rng.choice(n, size=k, replace=False)


def _check(f, analytic, arrays, rng, per_tensor):
    worst = 0.0
    for a, g in zip(arrays, analytic):
        idx = _sample(a, rng, per_tensor)
        num = numeric_grad(f, a, idx, H)
        worst = max(worst, float(rel_error(g.reshape(-1)[idx], num).max()))
    return worst


def check_conv(rng, k, padding, relu=True, per_tensor=200):
    x = rng.standard_normal((2, 7, 6, 3))
    W = rng.standard_normal((k, k, 3, 4)) * 0.5
    b = rng.standard_normal(4) * 0.1
    out, _ = L.conv_forward(x, W, b, padding, relu)
    R = rng.standard_normal(out.shape)

    def f():
        return float((L.conv_forward(x, W, b, padding, relu)[0] * R).sum())

    _, cache = L.conv_forward(x, W, b, padding, relu)
    dx, dW, db = L.conv_backward(R, cache)
    return _check(f, [dx, dW, db], [x, W, b], rng, per_tensor)


def check_pool(rng, k, padding, per_tensor=200):
    x = rng.standard_normal((2, 7, 5, 3))
    out, cache = L.maxpool_forward(x, k, padding)
    R = rng.standard_normal(out.shape)

    def f():
        return float((L.maxpool_forward(x, k, padding)[0] * R).sum())

    return _check(f, [L.maxpool_backward(R, cache)], [x], rng, per_tensor)


def check_dense(rng, relu=True, per_tensor=200):
    x = rng.standard_normal((4, 9))
    W = rng.standard_normal((9, 5))
    b = rng.standard_normal(5)
    out, cache = L.dense_forward(x, W, b, relu)
    R = rng.standard_normal(out.shape)

    def f():
        return float((L.dense_forward(x, W, b, relu)[0] * R).sum())

    return _check(f, list(L.dense_backward(R, cache)), [x, W, b], rng, per_tensor)


def check_dropout(rng, rate=0.33):
    x = rng.standard_normal((4, 10))
    seed = int(rng.integers(2**31))
    out, keep = L.dropout_forward(x, rate, np.random.default_rng(seed))
    R = rng.standard_normal(out.shape)

    def f():
        return float((L.dropout_forward(x, rate, np.random.default_rng(seed))[0] * R).sum())

    return _check(f, [L.dropout_backward(R, keep)], [x], rng, 100)


def routing_signature(spec, params, x, seed):
    """Bytes identifying every ReLU on/off state and max-pool winner."""
    _, (_, caches) = forward(spec, params, x, training=True, rng=np.random.default_rng(seed))
    parts = []
    for ly, c in zip(spec.layers, caches):
        if ly.kind in ("conv", "dense") and c[-1] is not None:
            parts.append(np.packbits(c[-1] > 0))
        elif ly.kind == "maxpool":
            xp, out, _, k = c
            big = np.repeat(np.repeat(out, k, axis=1), k, axis=2)
            parts.append(np.packbits(xp == big))
    return b"".join(p.tobytes() for p in parts)


def check_network(spec, rng, class_weights=(1.0, 3.0), l1=None, n=4, per_tensor=40):
    """Loss gradients of a whole network, dropout mask frozen by reseeding.

    Entries whose finite-difference stencil crosses a ReLU or max-pool
    switch are skipped: the loss is not differentiable across that
    interval. Returns ``(worst relative error, fraction checked)``.
    """
    params = []
    for p in init_params(spec, rng, np.float64):
        # small positive biases keep units off the ReLU kink
        params.append((p[0], rng.uniform(0.01, 0.1, p[1].shape)) if p else ())
    x = rng.uniform(0.0, 1.0, (n, *spec.input_shape))
    y = np.arange(n) % 2
    seed = int(rng.integers(2**31))

    def loss():
        return loss_and_grads(spec, params, x, y, class_weights, l1=l1, rng=np.random.default_rng(seed))[0]

    _, grads = loss_and_grads(spec, params, x, y, class_weights, l1=l1, rng=np.random.default_rng(seed))
    base = routing_signature(spec, params, x, seed)
    worst, checked, total = 0.0, 0, 0
    for p, gp in zip(params, grads):
        for a, g in zip(p, gp):
            flat = a.reshape(-1)
            for i in _sample(a, rng, per_tensor):
                total += 1
                old = flat[i]
                flat[i] = old + H
                fp, sp = loss(), routing_signature(spec, params, x, seed)
                flat[i] = old - H
                fm, sm = loss(), routing_signature(spec, params, x, seed)
                flat[i] = old
                if sp != base or sm != base:
                    continue
                checked += 1
                worst = max(worst, float(rel_error(g.reshape(-1)[i], (fp - fm) / (2 * H))))
    return worst, checked / total


def all_layer_checks(seed=0):
    """Worst relative error per layer kind."""
    rng = np.random.default_rng(seed)
    return {
        "conv1x1": check_conv(rng, 1, "valid"),
        "conv2x2 valid": check_conv(rng, 2, "valid"),
        "conv3x3 valid": check_conv(rng, 3, "valid"),
        "conv2x2 same": check_conv(rng, 2, "same"),
        "conv3x3 same": check_conv(rng, 3, "same"),
        "conv linear": check_conv(rng, 3, "valid", relu=False),
        "maxpool2 valid": check_pool(rng, 2, "valid"),
        "maxpool3 valid": check_pool(rng, 3, "valid"),
        "maxpool3 same": check_pool(rng, 3, "same"),
        "maxpool2 same": check_pool(rng, 2, "same"),
        "dense": check_dense(rng),
        "softmax logits": check_dense(rng, relu=False),
        "dropout": check_dropout(rng),
    }


def deeplnino_check(seed=0, per_tensor=40, n=4, plane=(40, 37)):
    """Full DeepLNiNo stack on a toy plane. From 35x35 upward the stack
    collapses to 1x1x16 before the dense layer, so the parameter set is the
    9,762 of the full-size network."""
    rng = np.random.default_rng(seed)
    spec = build_deeplnino(6, 2, input_plane=plane, l1=1e-3)
    return check_network(spec, rng, (1.0, 3.0), n=n, per_tensor=per_tensor)
