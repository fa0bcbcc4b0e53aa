# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for stacks of small dense ReLU networks.

Parameter layout (per network, flat): for each layer ``l`` the transposed
weight block ``Wt[l]`` of shape ``(n_in, n_out)`` in row-major order,
followed by the bias ``b[l]`` of length ``n_out``. All networks of a stack
share one architecture and one input batch ``X``.

Every kernel here has a NumPy twin in :mod:`asilfd._pycore` with the same
signature; results agree up to floating-point reassociation.
"""
import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, tanh
from libc.stdlib cimport free, malloc

cnp.import_array()

# below this width a layer is walked column-wise
cdef enum:
    NARROW = 8


cdef inline floating _dot(const floating* a, const floating* b, Py_ssize_t n, Py_ssize_t stride) noexcept nogil:
    """``sum_k a[k] * b[k * stride]`` with four independent partial sums."""
    cdef floating s0 = 0, s1 = 0, s2 = 0, s3 = 0
    cdef Py_ssize_t k = 0
    while k + 4 <= n:
        s0 = s0 + a[k] * b[k * stride]
        s1 = s1 + a[k + 1] * b[(k + 1) * stride]
        s2 = s2 + a[k + 2] * b[(k + 2) * stride]
        s3 = s3 + a[k + 3] * b[(k + 3) * stride]
        k += 4
    while k < n:
        s0 = s0 + a[k] * b[k * stride]
        k += 1
    return (s0 + s1) + (s2 + s3)


cdef inline void _forward_row(
    const floating* th,
    const Py_ssize_t* sizes,
    const Py_ssize_t* poff,
    Py_ssize_t n_layers,
    bint tanh_out,
    const floating* x,
    floating* act,
) noexcept nogil:
    cdef Py_ssize_t l, j, k, nin, nout
    cdef const floating* a_prev = x
    cdef floating* z = act
    cdef const floating* W
    cdef const floating* b
    cdef const floating* w
    cdef floating ak
    for l in range(n_layers):
        nin = sizes[l]
        nout = sizes[l + 1]
        W = th + poff[l]
        b = W + nin * nout
        for j in range(nout):
            z[j] = b[j]
        if nout >= NARROW:
            for k in range(nin):
                ak = a_prev[k]
                w = W + k * nout
                for j in range(nout):
                    z[j] += ak * w[j]
        else:
            # narrow layer: dot products along the input axis
            for j in range(nout):
                z[j] += _dot(a_prev, W + j, nin, nout)
        if l < n_layers - 1:
            # branch-free ReLU: signs are unpredictable
            for j in range(nout):
                z[j] = z[j] if z[j] > 0 else 0
        elif tanh_out:
            for j in range(nout):
                z[j] = tanh(z[j])
        a_prev = z
        z += nout


cdef inline void _backward_row(
    const floating* th,
    const Py_ssize_t* sizes,
    const Py_ssize_t* poff,
    const Py_ssize_t* aoff,
    Py_ssize_t n_layers,
    bint tanh_out,
    const floating* x,
    const floating* act,
    const floating* g,
    floating* gth,
    floating* gx,
    floating* d,
    floating* d2,
) noexcept nogil:
    cdef Py_ssize_t l, j, k, nin, nout
    cdef const floating* out = act + aoff[n_layers - 1]
    cdef const floating* a_prev
    cdef const floating* W
    cdef const floating* w
    cdef floating* gW
    cdef floating* gb
    cdef floating* gw
    cdef floating* tmp
    cdef floating ak, s
    nout = sizes[n_layers]
    for j in range(nout):
        if tanh_out:
            d[j] = g[j] * (1 - out[j] * out[j])
        else:
            d[j] = g[j]
    for l in range(n_layers - 1, -1, -1):
        nin = sizes[l]
        nout = sizes[l + 1]
        W = th + poff[l]
        if l == 0:
            a_prev = x
        else:
            a_prev = act + aoff[l - 1]
        if gth != NULL:
            gW = gth + poff[l]
            gb = gW + nin * nout
            for j in range(nout):
                gb[j] += d[j]
            if nout >= NARROW:
                for k in range(nin):
                    ak = a_prev[k]
                    gw = gW + k * nout
                    for j in range(nout):
                        gw[j] += ak * d[j]
            else:
                for j in range(nout):
                    s = d[j]
                    for k in range(nin):
                        gW[k * nout + j] += a_prev[k] * s
        if l > 0:
            if nout >= NARROW:
                for k in range(nin):
                    d2[k] = _dot(W + k * nout, d, nout, 1)
            else:
                for k in range(nin):
                    d2[k] = 0
                for j in range(nout):
                    s = d[j]
                    for k in range(nin):
                        d2[k] += W[k * nout + j] * s
            for k in range(nin):
                d2[k] = d2[k] if a_prev[k] > 0 else 0
            tmp = d
            d = d2
            d2 = tmp
        elif gx != NULL:
            for k in range(nin):
                gx[k] = _dot(W + k * nout, d, nout, 1)


cdef tuple _offsets(sizes):
    n_layers = len(sizes) - 1
    poff = np.zeros(n_layers, dtype=np.intp)
    aoff = np.zeros(n_layers, dtype=np.intp)
    p = 0
    a = 0
    for l in range(n_layers):
        poff[l] = p
        aoff[l] = a
        p += sizes[l] * sizes[l + 1] + sizes[l + 1]
        a += sizes[l + 1]
    return poff, aoff, p, a


def forward(floating[:, ::1] theta, sizes, bint tanh_out, floating[:, ::1] X):
    """Run every network of the stack on ``X``.

    Returns the post-activation record ``acts`` of shape ``(E, B, U)`` where
    ``U`` is the total width of all non-input layers; the network output is
    the trailing ``sizes[-1]`` columns.
    """
    cdef Py_ssize_t[::1] sz = np.asarray(sizes, dtype=np.intp)
    poff_arr, aoff_arr, n_params, n_units = _offsets(sizes)
    cdef Py_ssize_t[::1] poff = poff_arr
    cdef Py_ssize_t n_layers = sz.shape[0] - 1
    cdef Py_ssize_t E = theta.shape[0], B = X.shape[0], U = n_units
    cdef Py_ssize_t e, r
    if theta.shape[1] != n_params or X.shape[1] != sz[0]:
        raise ValueError("parameter or input shape does not match architecture")
    dtype = np.float64 if floating is double else np.float32
    acts_arr = np.empty((E, B, U), dtype=dtype)
    cdef floating[:, :, ::1] acts = acts_arr
    if B == 0:
        return acts_arr
    with nogil:
        for e in range(E):
            for r in range(B):
                _forward_row(&theta[e, 0], &sz[0], &poff[0], n_layers, tanh_out,
                             &X[r, 0], &acts[e, r, 0])
    return acts_arr


def backward(
    floating[:, ::1] theta,
    sizes,
    bint tanh_out,
    floating[:, ::1] X,
    floating[:, :, ::1] acts,
    floating[:, :, ::1] G,
    bint param_grads=True,
    bint input_grad=True,
):
    """Gradients of ``sum(output * G)`` for every network of the stack.

    Returns ``(gtheta, gX)``; either entry is ``None`` when not requested.
    ``gtheta`` has shape ``(E, P)`` and ``gX`` shape ``(E, B, n_in)``.
    """
    cdef Py_ssize_t[::1] sz = np.asarray(sizes, dtype=np.intp)
    poff_arr, aoff_arr, n_params, n_units = _offsets(sizes)
    cdef Py_ssize_t[::1] poff = poff_arr
    cdef Py_ssize_t[::1] aoff = aoff_arr
    cdef Py_ssize_t n_layers = sz.shape[0] - 1
    cdef Py_ssize_t E = theta.shape[0], B = X.shape[0], nin0 = sz[0], nout = sz[n_layers]
    cdef Py_ssize_t e, r, maxw = 0, i
    if theta.shape[1] != n_params or X.shape[1] != nin0:
        raise ValueError("parameter or input shape does not match architecture")
    if acts.shape[0] != E or acts.shape[1] != B or acts.shape[2] != n_units:
        raise ValueError("activation record does not match this stack and batch")
    if G.shape[0] != E or G.shape[1] != B or G.shape[2] != nout:
        raise ValueError("output gradient shape mismatch")
    for i in range(n_layers + 1):
        if sz[i] > maxw:
            maxw = sz[i]
    dtype = np.float64 if floating is double else np.float32
    gtheta_arr = np.zeros((E, n_params), dtype=dtype) if param_grads else None
    gx_arr = np.zeros((E, B, nin0), dtype=dtype) if input_grad else None
    cdef floating[:, ::1] gth
    cdef floating[:, :, ::1] gx
    cdef floating* gth_ptr = NULL
    cdef floating* gx_ptr = NULL
    if param_grads:
        gth = gtheta_arr
    if input_grad:
        gx = gx_arr
    if B == 0:
        return gtheta_arr, gx_arr
    cdef floating* d = <floating*> malloc(2 * maxw * sizeof(floating))
    if d == NULL:
        raise MemoryError()
    try:
        with nogil:
            for e in range(E):
                if param_grads:
                    gth_ptr = &gth[e, 0]
                for r in range(B):
                    if input_grad:
                        gx_ptr = &gx[e, r, 0]
                    _backward_row(&theta[e, 0], &sz[0], &poff[0], &aoff[0], n_layers,
                                  tanh_out, &X[r, 0], &acts[e, r, 0], &G[e, r, 0],
                                  gth_ptr, gx_ptr, d, d + maxw)
    finally:
        free(d)
    return gtheta_arr, gx_arr


def adam(floating[::1] theta, const floating[::1] grad, floating[::1] m, floating[::1] v,
         double lr, double beta1, double beta2, double eps, long step):
    """Bias-corrected Adam update applied in place (``step`` is 1-based)."""
    cdef Py_ssize_t i, n = theta.shape[0]
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    cdef double g, mi, vi
    if grad.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("Adam buffers differ in length")
    with nogil:
        for i in range(n):
            g = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * g * g
            m[i] = mi
            v[i] = vi
            theta[i] = theta[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps)


def polyak(floating[::1] target, const floating[::1] online, double tau):
    """``target <- tau * online + (1 - tau) * target`` in place."""
    cdef Py_ssize_t i, n = target.shape[0]
    if online.shape[0] != n:
        raise ValueError("Polyak operands differ in length")
    with nogil:
        for i in range(n):
            target[i] = tau * online[i] + (1.0 - tau) * target[i]
