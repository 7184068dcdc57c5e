"""Shared test utilities: finite-difference gradient checks and oracles.

The oracles here are written independently of the library code paths they
check (direct loops, no shared helpers) so they stay meaningful.
"""

import numpy as np

from signflow import tensor as T


def rel_err(a, n):
    """Elementwise relative error, scale-aware for small magnitudes."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return np.max(np.abs(a - n) / denom)


def fd_gradient(fn, x, h=1e-5):
    """Central finite differences of scalar fn w.r.t. array x (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_gradients(build_loss, tensors, tol=1e-4, h=1e-5):
    """Compare analytic grads of build_loss(*tensors) against central FD.

    tensors: list of T.Tensor leaves with requires_grad=True (float64).
    Returns the worst relative error across all leaves.
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked leaf"
        analytic = t.grad.copy()

        def scalar_at(arr, t=t):
            old = t.data
            t.data = arr
            with T.no_grad():
                val = float(build_loss().data)
            t.data = old
            return val

        numeric = fd_gradient(scalar_at, t.data.copy(), h=h)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def conv2d_oracle(x, w, b, stride=1, padding=0):
    """Direct sliding-window summation, quadruple loop."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[ni, ci, i * stride + a, j * stride + bb] * w[co, ci, a, bb]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def attention_oracle(q, k, v):
    """Brute-force token attention: q,k,v are (T, C) arrays."""
    t, c = q.shape
    out = np.zeros_like(v)
    for i in range(t):
        scores = np.array([float(q[i] @ k[j]) / np.sqrt(c) for j in range(t)])
        scores = scores - scores.max()
        w = np.exp(scores)
        w = w / w.sum()
        for j in range(t):
            out[i] += w[j] * v[j]
    return out
