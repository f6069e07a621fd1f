"""Fused recurrent-layer kernels used by the training loop.

The reference cells (``ddlstm.cells``) step one timestep at a time and get
their gradients from the tape in ``ddlstm.diffgraph``. Training needs tens of
thousands of windows, so this module runs a whole window of one layer inside
numba with a hand-derived backward pass. ``tests/test_engine.py`` checks it
against both the reference cells and the tape.

Normalization modes: 0 = none (plain LSTM), 1 = batch norm, 2 = dual-domain
batch norm at the hidden and input sites. The cell site uses plain batch norm
whenever mode > 0.

Weighted normalization is the common kernel: rows ``j < n1`` use domain-1
statistics, the rest use domain-2 statistics, each computed with the
normalized weight vectors ``w1``/``w2`` (sum to one). Plain batch norm is the
case ``n1 = N`` with uniform weights.
"""

import ctypes
import ctypes.util
import math

import numpy as np
from numba import njit


def _keep_heap_pages():
    """Stop glibc from serving the per-window buffers (a few MB) with fresh
    mmap pages. Each call would otherwise page-fault its way through them,
    which costs about as much as the arithmetic."""
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, (1 << 31) - 1)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_keep_heap_pages()

MODE_LSTM = 0
MODE_BN = 1
MODE_DDBN = 2

# reductions may be reordered; no finite-math assumptions
_REDUCE = {"reassoc", "contract", "nsz"}


# exp(x) = 2**k * e**r with |r| <= ln2/2; Taylor series to degree 13 is
# accurate to ~2e-16. Written as plain loops (no libm call, no float->int
# conversion) so LLVM vectorizes it; libm exp/tanh calls do not vectorize.
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INV_LN2 = 1.44269504088896338700e+00
_SHIFT = 6755399441055744.0  # 1.5 * 2**52: adding it rounds to an integer
_SHIFT_BITS = np.int64(np.float64(_SHIFT).view(np.int64))
_C = [1.0 / math.factorial(i) for i in range(14)]
_C2, _C3, _C4, _C5, _C6, _C7, _C8, _C9, _C10, _C11, _C12, _C13 = _C[2:]


@njit(cache=True, fastmath={"contract"})
def vexp(x, out):
    """out[i] = exp(x[i]) for 1-d contiguous arrays, arguments clamped to +-708."""
    n = x.size
    shifted = np.empty(n)
    for i in range(n):
        v = min(max(x[i], -708.0), 708.0)
        sh = v * _INV_LN2 + _SHIFT
        k = sh - _SHIFT
        r = v - k * _LN2_HI - k * _LN2_LO
        out[i] = 1.0 + r * (1.0 + r * (_C2 + r * (_C3 + r * (_C4 + r * (_C5 + r * (_C6 + r * (
            _C7 + r * (_C8 + r * (_C9 + r * (_C10 + r * (_C11 + r * (_C12 + r * _C13))))))))))))
        shifted[i] = sh
    bits = shifted.view(np.int64)
    for i in range(n):
        bits[i] = ((bits[i] - _SHIFT_BITS) + 1023) << 52
    scale = bits.view(np.float64)
    for i in range(n):
        out[i] *= scale[i]


@njit(cache=True, fastmath=_REDUCE)
def norm_forward(x, w1, w2, n1, gamma, beta, eps, y, mu, var, r):
    N, F = x.shape
    # with every row in domain 1 the second slot just mirrors the first
    nd = 2 if n1 < N else 1
    for d in range(nd):
        for f in range(F):
            mu[d, f] = 0.0
            var[d, f] = 0.0
    # both domains share each sweep over x; per-slot summation order is
    # unchanged
    for j in range(N):
        for d in range(nd):
            wj = w1[j] if d == 0 else w2[j]
            for f in range(F):
                mu[d, f] += wj * x[j, f]
    for j in range(N):
        for d in range(nd):
            wj = w1[j] if d == 0 else w2[j]
            for f in range(F):
                dev = x[j, f] - mu[d, f]
                var[d, f] += wj * dev * dev
    for d in range(nd):
        for f in range(F):
            r[d, f] = 1.0 / np.sqrt(var[d, f] + eps)
    if nd == 1:
        for f in range(F):
            mu[1, f] = mu[0, f]
            var[1, f] = var[0, f]
            r[1, f] = r[0, f]
    for j in range(N):
        d = 0 if j < n1 else 1
        for f in range(F):
            y[j, f] = beta[f] + gamma[f] * (x[j, f] - mu[d, f]) * r[d, f]


@njit(cache=True, fastmath=_REDUCE)
def norm_backward(dy, x, w1, w2, n1, gamma, mu, r, dx, dgamma, dbeta, dw1, dw2, need_dw):
    """Accumulates into dgamma, dbeta, dw1, dw2 (the latter two only when
    `need_dw`); overwrites dx."""
    N, F = x.shape
    dmu = np.zeros((2, F))
    dv = np.zeros((2, F))
    # own-domain rows: direct term plus the per-domain reductions
    for d in range(2):
        lo = 0 if d == 0 else n1
        hi = n1 if d == 0 else N
        for j in range(lo, hi):
            for f in range(F):
                dev = x[j, f] - mu[d, f]
                gj = gamma[f] * dy[j, f]
                dbeta[f] += dy[j, f]
                dgamma[f] += dy[j, f] * dev * r[d, f]
                dx[j, f] = r[d, f] * gj
                dmu[d, f] -= r[d, f] * gj
                dv[d, f] += gj * dev
        for f in range(F):
            dv[d, f] *= -0.5 * r[d, f] * r[d, f] * r[d, f]
    has1 = n1 > 0
    has2 = n1 < N
    # every row feeds both domains' statistics through its weights
    for k in range(N):
        a1 = w1[k] if has1 else 0.0
        a2 = w2[k] if has2 else 0.0
        acc1 = 0.0
        acc2 = 0.0
        for f in range(F):
            dev1 = x[k, f] - mu[0, f]
            dev2 = x[k, f] - mu[1, f]
            t1 = dmu[0, f] + 2.0 * dev1 * dv[0, f]
            t2 = dmu[1, f] + 2.0 * dev2 * dv[1, f]
            dx[k, f] += a1 * t1 + a2 * t2
            if need_dw:
                acc1 += x[k, f] * dmu[0, f] + dev1 * dev1 * dv[0, f]
                acc2 += x[k, f] * dmu[1, f] + dev2 * dev2 * dv[1, f]
        if need_dw:
            dw1[k] += acc1
            dw2[k] += acc2


@njit(cache=True)
def layer_forward(AX, Wh, b, gh, bh, gx, bx, gc, bc, mode, n1, w1, w2, eps,
                  train, pop_mu, pop_var, dom):
    """One layer over a window.

    AX: (T, N, 4H) input projections W_x x_t. Training mode normalizes with
    batch statistics; inference mode uses pop_mu/pop_var of shape
    (3, 2, Tmax, 4H) (sites hidden, input, cell; cell uses the first H
    columns) selected per sample by `dom` (0 or 1).
    Returns hidden outputs (T, N, H) and the cache the backward pass needs.
    """
    T, N, G = AX.shape
    H = G // 4
    # every slot below is written before it is read; only the initial
    # state needs zeroing
    h = np.empty((T + 1, N, H))
    c = np.empty((T + 1, N, H))
    h[0] = 0.0
    c[0] = 0.0
    gates = np.empty((T, N, G))  # activated f, i, o, g
    AH = np.empty((T, N, G))
    tc = np.empty((T, N, H))  # tanh(BN(c))
    mu_h = np.zeros((T, 2, G))
    var_h = np.zeros((T, 2, G))
    r_h = np.zeros((T, 2, G))
    mu_x = np.zeros((T, 2, G))
    var_x = np.zeros((T, 2, G))
    r_x = np.zeros((T, 2, G))
    mu_c = np.zeros((T, 2, H))
    var_c = np.zeros((T, 2, H))
    r_c = np.zeros((T, 2, H))
    uni = np.full(N, 1.0 / N)
    yh = np.empty((N, G))
    yx = np.empty((N, G))
    yc = np.empty((N, H))
    zbuf = np.empty((N, G))
    ebuf = np.empty((N, G))
    zc = np.empty((N, H))
    ec = np.empty((N, H))
    WhT = Wh.T.copy()
    Tmax = pop_mu.shape[2]
    for t in range(T):
        ah = AH[t]
        np.dot(h[t], WhT, ah)
        ax = AX[t]
        if mode == MODE_LSTM:
            for j in range(N):
                for f in range(G):
                    yh[j, f] = ah[j, f]
                    yx[j, f] = ax[j, f]
        elif train:
            norm_forward(ah, w1, w2, n1, gh, bh, eps, yh, mu_h[t], var_h[t], r_h[t])
            norm_forward(ax, w1, w2, n1, gx, bx, eps, yx, mu_x[t], var_x[t], r_x[t])
        else:
            ts = min(t, Tmax - 1)
            for j in range(N):
                d = dom[j]
                for f in range(G):
                    yh[j, f] = bh[f] + gh[f] * (ah[j, f] - pop_mu[0, d, ts, f]) / np.sqrt(pop_var[0, d, ts, f] + eps)
                    yx[j, f] = bx[f] + gx[f] * (ax[j, f] - pop_mu[1, d, ts, f]) / np.sqrt(pop_var[1, d, ts, f] + eps)
        # sigmoid(z) = 1 / (1 + e^-z); tanh(z) = 2 / (1 + e^-2z) - 1
        for j in range(N):
            for f in range(3 * H):
                zbuf[j, f] = -(yh[j, f] + yx[j, f] + b[f])
            for f in range(3 * H, G):
                zbuf[j, f] = -2.0 * (yh[j, f] + yx[j, f] + b[f])
        vexp(zbuf.ravel(), ebuf.ravel())
        gt = gates[t]
        cp = c[t]
        cn = c[t + 1]
        for j in range(N):
            for f in range(3 * H):
                gt[j, f] = 1.0 / (1.0 + ebuf[j, f])
            for f in range(3 * H, G):
                gt[j, f] = 2.0 / (1.0 + ebuf[j, f]) - 1.0
            for k in range(H):
                cn[j, k] = gt[j, k] * cp[j, k] + gt[j, H + k] * gt[j, 3 * H + k]
        if mode == MODE_LSTM:
            for j in range(N):
                for k in range(H):
                    yc[j, k] = c[t + 1, j, k]
        elif train:
            norm_forward(c[t + 1], uni, uni, N, gc, bc, eps, yc, mu_c[t], var_c[t], r_c[t])
        else:
            ts = min(t, Tmax - 1)
            for j in range(N):
                d = dom[j]
                for k in range(H):
                    yc[j, k] = bc[k] + gc[k] * (c[t + 1, j, k] - pop_mu[2, d, ts, k]) / np.sqrt(pop_var[2, d, ts, k] + eps)
        for j in range(N):
            for k in range(H):
                zc[j, k] = -2.0 * yc[j, k]
        vexp(zc.ravel(), ec.ravel())
        for j in range(N):
            for k in range(H):
                th = 2.0 / (1.0 + ec[j, k]) - 1.0
                tc[t, j, k] = th
                h[t + 1, j, k] = gates[t, j, 2 * H + k] * th
    return (h, c, gates, AH, tc, mu_h, var_h, r_h, mu_x, var_x, r_x, mu_c, var_c, r_c)


@njit(cache=True)
def layer_backward(dH, AX, Wh, gh, gx, gc, mode, n1, w1, w2, cache):
    """Backward pass for `layer_forward` in training mode.

    dH: (T, N, H) gradient w.r.t. the layer's hidden outputs.
    Returns dAX (T, N, 4H), dWh, db, dgh, dbh, dgx, dbx, dgc, dbc, dw1, dw2.
    """
    h, c, gates, AH, tc, mu_h, var_h, r_h, mu_x, var_x, r_x, mu_c, var_c, r_c = cache
    T, N, G = AX.shape
    H = G // 4
    dAX = np.empty((T, N, G))
    dAH = np.empty((T, N, G))
    db = np.zeros(G)
    dgh = np.zeros(G)
    dbh = np.zeros(G)
    dgx = np.zeros(G)
    dbx = np.zeros(G)
    dgc = np.zeros(H)
    dbc = np.zeros(H)
    dw1 = np.zeros(N)
    dw2 = np.zeros(N)
    dw_unused = np.zeros(N)
    uni = np.full(N, 1.0 / N)
    dh_next = np.zeros((N, H))
    dc_next = np.zeros((N, H))
    dyc = np.empty((N, H))
    dcn = np.empty((N, H))
    dpre = np.empty((N, G))
    need_dw = mode == MODE_DDBN and 0 < n1 < N
    for t in range(T - 1, -1, -1):
        gt = gates[t]
        tct = tc[t]
        dHt = dH[t]
        for j in range(N):
            for k in range(H):
                dh = dHt[j, k] + dh_next[j, k]
                og = gt[j, 2 * H + k]
                th = tct[j, k]
                dpre[j, 2 * H + k] = dh * th * og * (1.0 - og)
                dyc[j, k] = dh * og * (1.0 - th * th)
        if mode == MODE_LSTM:
            for j in range(N):
                for k in range(H):
                    dcn[j, k] = dyc[j, k]
        else:
            norm_backward(dyc, c[t + 1], uni, uni, N, gc, mu_c[t], r_c[t],
                          dcn, dgc, dbc, dw_unused, dw_unused, False)
        cp = c[t]
        for j in range(N):
            for k in range(H):
                dc = dcn[j, k] + dc_next[j, k]
                fg = gt[j, k]
                ig = gt[j, H + k]
                gg = gt[j, 3 * H + k]
                dpre[j, k] = dc * cp[j, k] * fg * (1.0 - fg)
                dpre[j, H + k] = dc * gg * ig * (1.0 - ig)
                dpre[j, 3 * H + k] = dc * ig * (1.0 - gg * gg)
                dc_next[j, k] = dc * fg
        for j in range(N):
            for f in range(G):
                db[f] += dpre[j, f]
        dah = dAH[t]
        dax = dAX[t]
        if mode == MODE_LSTM:
            for j in range(N):
                for f in range(G):
                    dah[j, f] = dpre[j, f]
                    dax[j, f] = dpre[j, f]
        else:
            norm_backward(dpre, AH[t], w1, w2, n1, gh, mu_h[t], r_h[t], dah, dgh, dbh, dw1, dw2,
                          need_dw)
            norm_backward(dpre, AX[t], w1, w2, n1, gx, mu_x[t], r_x[t], dax, dgx, dbx, dw1, dw2,
                          need_dw)
        np.dot(dah, Wh, dh_next)
    dWh = dAH.reshape(T * N, G).T @ h[:T].reshape(T * N, H)
    return dAX, dWh, db, dgh, dbh, dgx, dbx, dgc, dbc, dw1, dw2


@njit(cache=True)
def tau_grad(dw, tau):
    """Map gradients w.r.t. normalized weights w = tau / sum(tau) to tau."""
    s = tau.sum()
    inner = 0.0
    for k in range(len(tau)):
        inner += tau[k] / s * dw[k]
    return (dw - inner) / s
