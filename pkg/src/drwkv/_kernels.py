"""Compiled scan loops behind the WKV primitives.

Inputs are contiguous arrays with all leading dimensions folded into one
batch axis ``N``: v4 tensors are (N, T, D); matrix-state tensors (N, T, H, n).
"""
import numpy as np
from numba import njit


@njit(cache=True)
def wkv4_forward(k, v, w, u):
    N, T, D = k.shape
    out = np.empty_like(k)
    for b in range(N):
        for c in range(D):
            aa = 0.0
            bb = 0.0
            pp = -np.inf
            for t in range(T):
                kt = k[b, t, c]
                vt = v[b, t, c]
                ww = u[c] + kt
                p = max(pp, ww)
                e1 = np.exp(pp - p)
                e2 = np.exp(ww - p)
                out[b, t, c] = (e1 * aa + e2 * vt) / (e1 * bb + e2)
                ww = pp - w[c]
                p = max(ww, kt)
                e1 = np.exp(ww - p)
                e2 = np.exp(kt - p)
                aa = e1 * aa + e2 * vt
                bb = e1 * bb + e2
                pp = p
    return out


@njit(cache=True)
def wkv4_backward(k, v, w, u, out, g):
    """Reverse scan; exponentials are shifted by each sequence's key maximum."""
    N, T, D = k.shape
    dk = np.empty_like(k)
    dv = np.empty_like(k)
    dw = np.zeros((N, D), k.dtype)
    du = np.zeros((N, D), k.dtype)
    a_prev = np.empty(T, k.dtype)
    b_prev = np.empty(T, k.dtype)
    ek = np.empty(T, k.dtype)
    for b in range(N):
        for c in range(D):
            dec = np.exp(-w[c])
            eu = np.exp(u[c])
            kmax = k[b, 0, c]
            for t in range(1, T):
                kmax = max(kmax, k[b, t, c])
            a = 0.0
            bsum = 0.0
            for t in range(T):
                ek[t] = np.exp(k[b, t, c] - kmax)
                a_prev[t] = a
                b_prev[t] = bsum
                a = dec * a + ek[t] * v[b, t, c]
                bsum = dec * bsum + ek[t]
            ga = 0.0
            gb = 0.0
            sw = 0.0
            su = 0.0
            for t in range(T - 1, -1, -1):
                gt = g[b, t, c]
                vt = v[b, t, c]
                ot = out[b, t, c]
                e = eu * ek[t]
                inv = 1.0 / (b_prev[t] + e)
                cur = gt * e * inv
                dv[b, t, c] = cur + ga * ek[t]
                su += cur * (vt - ot)
                dk[b, t, c] = cur * (vt - ot) + ek[t] * (ga * vt + gb)
                sw -= dec * (ga * a_prev[t] + gb * b_prev[t])
                ga = dec * ga + gt * inv
                gb = dec * gb - gt * ot * inv
            dw[b, c] = sw
            du[b, c] = su
    return dk, dv, dw, du


@njit(cache=True)
def matrix_forward(r, k, v, w, u):
    N, T, H, n = k.shape
    out = np.zeros_like(k)
    S = np.zeros((n, n), k.dtype)
    for b in range(N):
        for h in range(H):
            S[:, :] = 0.0
            for t in range(T):
                bonus = 0.0
                for i in range(n):
                    bonus += r[b, t, h, i] * u[h, i] * k[b, t, h, i]
                for j in range(n):
                    acc = bonus * v[b, t, h, j]
                    for i in range(n):
                        acc += r[b, t, h, i] * S[i, j]
                    out[b, t, h, j] = acc
                for i in range(n):
                    wi = w[b, t, h, i]
                    ki = k[b, t, h, i]
                    for j in range(n):
                        S[i, j] = wi * S[i, j] + ki * v[b, t, h, j]
    return out


@njit(cache=True)
def matrix_backward(r, k, v, w, u, g):
    N, T, H, n = k.shape
    dr = np.empty_like(k)
    dk = np.empty_like(k)
    dv = np.empty_like(k)
    dw = np.empty_like(k)
    du = np.zeros((N, H, n), k.dtype)
    states = np.empty((T, n, n), k.dtype)
    S = np.zeros((n, n), k.dtype)
    gS = np.zeros((n, n), k.dtype)
    for b in range(N):
        for h in range(H):
            S[:, :] = 0.0
            for t in range(T):
                states[t] = S
                for i in range(n):
                    wi = w[b, t, h, i]
                    ki = k[b, t, h, i]
                    for j in range(n):
                        S[i, j] = wi * S[i, j] + ki * v[b, t, h, j]
            gS[:, :] = 0.0
            for t in range(T - 1, -1, -1):
                vg = 0.0
                rku = 0.0
                for i in range(n):
                    vg += v[b, t, h, i] * g[b, t, h, i]
                    rku += r[b, t, h, i] * u[h, i] * k[b, t, h, i]
                for i in range(n):
                    ri = r[b, t, h, i]
                    ki = k[b, t, h, i]
                    sp = 0.0
                    sv = 0.0
                    sw = 0.0
                    for j in range(n):
                        sp += states[t, i, j] * g[b, t, h, j]
                        sv += gS[i, j] * v[b, t, h, j]
                        sw += gS[i, j] * states[t, i, j]
                    dr[b, t, h, i] = u[h, i] * ki * vg + sp
                    dk[b, t, h, i] = ri * u[h, i] * vg + sv
                    dw[b, t, h, i] = sw
                    du[b, h, i] += ri * ki * vg
                for j in range(n):
                    s = 0.0
                    for i in range(n):
                        s += k[b, t, h, i] * gS[i, j]
                    dv[b, t, h, j] = g[b, t, h, j] * rku + s
                for i in range(n):
                    wi = w[b, t, h, i]
                    ri = r[b, t, h, i]
                    for j in range(n):
                        gS[i, j] = wi * gS[i, j] + ri * g[b, t, h, j]
    return dr, dk, dv, dw, du
