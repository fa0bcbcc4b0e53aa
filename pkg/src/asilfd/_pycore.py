"""Pure-NumPy twins of the compiled kernels in ``_core.pyx``.

Same signatures, same parameter layout, same in-place semantics. Used when
the extension is unavailable or when ``ASILFD_BACKEND=python``.
"""
from __future__ import annotations

import numpy as np


def _layers(theta: np.ndarray, sizes):
    off = 0
    for nin, nout in zip(sizes[:-1], sizes[1:]):
        Wt = theta[:, off : off + nin * nout].reshape(-1, nin, nout)
        off += nin * nout
        b = theta[:, off : off + nout]
        off += nout
        yield Wt, b
    if off != theta.shape[1]:
        raise ValueError("parameter or input shape does not match architecture")


def _n_params(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def forward(theta, sizes, tanh_out, X):
    if theta.shape[1] != _n_params(sizes) or X.shape[1] != sizes[0]:
        raise ValueError("parameter or input shape does not match architecture")
    E, B = theta.shape[0], X.shape[0]
    acts = np.empty((E, B, sum(sizes[1:])), dtype=theta.dtype)
    a = X
    col = 0
    n_layers = len(sizes) - 1
    for l, (Wt, b) in enumerate(_layers(theta, sizes)):
        z = np.matmul(a, Wt)
        z += b[:, None, :]
        if l < n_layers - 1:
            np.maximum(z, 0, out=z)
        elif tanh_out:
            np.tanh(z, out=z)
        nout = Wt.shape[2]
        acts[:, :, col : col + nout] = z
        col += nout
        a = z
    return acts


def backward(theta, sizes, tanh_out, X, acts, G, param_grads=True, input_grad=True):
    n_layers = len(sizes) - 1
    E, B = theta.shape[0], X.shape[0]
    if theta.shape[1] != _n_params(sizes) or X.shape[1] != sizes[0]:
        raise ValueError("parameter or input shape does not match architecture")
    if acts.shape != (E, B, sum(sizes[1:])):
        raise ValueError("activation record does not match this stack and batch")
    if G.shape != (E, B, sizes[-1]):
        raise ValueError("output gradient shape mismatch")
    layers = list(_layers(theta, sizes))
    bounds = np.cumsum([0, *sizes[1:]])
    outs = [acts[:, :, bounds[l] : bounds[l + 1]] for l in range(n_layers)]
    gtheta = np.zeros_like(theta) if param_grads else None
    gx = None
    d = G * (1 - outs[-1] ** 2) if tanh_out else G.copy()
    poffs = np.cumsum([0] + [a * b + b for a, b in zip(sizes[:-1], sizes[1:])])
    for l in range(n_layers - 1, -1, -1):
        Wt, _ = layers[l]
        nin, nout = sizes[l], sizes[l + 1]
        a_prev = outs[l - 1] if l > 0 else np.broadcast_to(X, (E, B, nin))
        if param_grads:
            p = poffs[l]
            gtheta[:, p : p + nin * nout] = np.matmul(a_prev.transpose(0, 2, 1), d).reshape(E, -1)
            gtheta[:, p + nin * nout : p + nin * nout + nout] = d.sum(axis=1)
        if l > 0:
            d = np.matmul(d, Wt.transpose(0, 2, 1)) * (a_prev > 0)
        elif input_grad:
            gx = np.matmul(d, Wt.transpose(0, 2, 1))
        else:
            break
    return gtheta, gx


def adam(theta, grad, m, v, lr, beta1, beta2, eps, step):
    if not (theta.shape == grad.shape == m.shape == v.shape):
        raise ValueError("Adam buffers differ in length")
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def polyak(target, online, tau):
    if target.shape != online.shape:
        raise ValueError("Polyak operands differ in length")
    target *= 1.0 - tau
    target += tau * online
