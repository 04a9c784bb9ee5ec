"""Compiled kernels for the fused layer-norm + relu^2 block.

State layout is ``(k, B, n)``: slice 0 holds pre-activations, slices 1..k-1
hold their input tangents. Rows are processed independently; parameter
gradients are reduced over rows in index order, so results are deterministic.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def norm_relu2_forward(s, gain, shift, eps):
    k, nb, n = s.shape
    nt = k - 1
    out = np.empty_like(s)
    zhat = np.empty((nb, n))
    r = np.empty((nb, n))
    inv = np.empty(nb)
    tc = np.empty((nt, nb, n))
    m = np.empty((nt, nb))
    dzhat = np.empty((nt, nb, n))
    for b in range(nb):
        mu = 0.0
        for i in range(n):
            mu += s[0, b, i]
        mu /= n
        var = 0.0
        for i in range(n):
            d = s[0, b, i] - mu
            var += d * d
        var /= n
        iv = 1.0 / np.sqrt(var + eps)
        inv[b] = iv
        for i in range(n):
            zh = (s[0, b, i] - mu) * iv
            zhat[b, i] = zh
            y = zh * gain[i] + shift[i]
            ri = y if y > 0.0 else 0.0
            r[b, i] = ri
            out[0, b, i] = ri * ri
        for j in range(nt):
            tm = 0.0
            for i in range(n):
                tm += s[1 + j, b, i]
            tm /= n
            mj = 0.0
            for i in range(n):
                c = s[1 + j, b, i] - tm
                tc[j, b, i] = c
                mj += zhat[b, i] * c
            mj /= n
            m[j, b] = mj
            for i in range(n):
                dz = (tc[j, b, i] - zhat[b, i] * mj) * iv
                dzhat[j, b, i] = dz
                out[1 + j, b, i] = 2.0 * r[b, i] * dz * gain[i]
    return out, zhat, r, inv, tc, m, dzhat


@numba.njit(cache=True)
def norm_relu2_backward(g, gain, zhat, r, inv, tc, m, dzhat):
    k, nb, n = g.shape
    nt = k - 1
    s_bar = np.empty_like(g)
    gain_bar = np.zeros(n)
    shift_bar = np.zeros(n)
    p = np.empty((nt, n))
    zhat_bar = np.empty(n)
    m_bar = np.empty(nt)
    for b in range(nb):
        iv = inv[b]
        inv_bar = 0.0
        for j in range(nt):
            m_bar[j] = 0.0
        for i in range(n):
            ri = r[b, i]
            gi = gain[i]
            r_bar = ri * g[0, b, i]
            for j in range(nt):
                r_bar += dzhat[j, b, i] * gi * g[1 + j, b, i]
            r_bar *= 2.0
            y_bar = r_bar if ri > 0.0 else 0.0
            acc_gain = y_bar * zhat[b, i]
            zb = y_bar * gi
            for j in range(nt):
                dyb = 2.0 * ri * g[1 + j, b, i]
                acc_gain += dyb * dzhat[j, b, i]
                pj = dyb * gi
                p[j, i] = pj
                zb -= pj * m[j, b] * iv
                m_bar[j] -= pj * zhat[b, i] * iv
                inv_bar += pj * (tc[j, b, i] - zhat[b, i] * m[j, b])
            gain_bar[i] += acc_gain
            shift_bar[i] += y_bar
            zhat_bar[i] = zb
        for j in range(nt):
            tmean = 0.0
            for i in range(n):
                v = p[j, i] * iv + zhat[b, i] * m_bar[j] / n
                s_bar[1 + j, b, i] = v
                tmean += v
                zhat_bar[i] += tc[j, b, i] * m_bar[j] / n
            tmean /= n
            for i in range(n):
                s_bar[1 + j, b, i] -= tmean
        for i in range(n):
            inv_bar += zhat_bar[i] * zhat[b, i] / iv
        var_bar = -0.5 * iv * iv * iv * inv_bar
        zmean = 0.0
        for i in range(n):
            v = zhat_bar[i] * iv + 2.0 * (zhat[b, i] / iv) * var_bar / n
            s_bar[0, b, i] = v
            zmean += v
        zmean /= n
        for i in range(n):
            s_bar[0, b, i] -= zmean
    return s_bar, gain_bar, shift_bar


@numba.njit(cache=True)
def relu2_forward(s):
    k, nb, n = s.shape
    out = np.empty_like(s)
    r = np.empty((nb, n))
    for b in range(nb):
        for i in range(n):
            y = s[0, b, i]
            ri = y if y > 0.0 else 0.0
            r[b, i] = ri
            out[0, b, i] = ri * ri
            for j in range(1, k):
                out[j, b, i] = 2.0 * ri * s[j, b, i]
    return out, r


@numba.njit(cache=True)
def relu2_backward(g, s, r):
    k, nb, n = g.shape
    s_bar = np.empty_like(g)
    for b in range(nb):
        for i in range(n):
            ri = r[b, i]
            acc = ri * g[0, b, i]
            for j in range(1, k):
                acc += s[j, b, i] * g[j, b, i]
                s_bar[j, b, i] = 2.0 * ri * g[j, b, i]
            s_bar[0, b, i] = 2.0 * acc if ri > 0.0 else 0.0
    return s_bar
