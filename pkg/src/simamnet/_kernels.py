"""Fused per-channel kernels for batch norm and SimAM.

Each kernel walks every (sample, channel) plane of an [N, C, H, W] array a
small fixed number of times, accumulating in float64. Results are
independent of thread count because every plane is reduced sequentially.
"""
from __future__ import annotations

import math

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)


@_jit
def bn_stats(x):
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c)
    var = np.zeros(c)
    for ci in range(c):
        acc = 0.0
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    acc += x[ni, ci, i, j]
        mu = acc / m
        acc = 0.0
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    d = x[ni, ci, i, j] - mu
                    acc += d * d
        mean[ci] = mu
        var[ci] = acc / m
    return mean, var


@_jit
def bn_apply(x, mean, inv, gamma, beta):
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for ni in range(n):
        for ci in range(c):
            a = gamma[ci] * inv[ci]
            b = beta[ci] - mean[ci] * a
            for i in range(h):
                for j in range(w):
                    out[ni, ci, i, j] = x[ni, ci, i, j] * a + b
    return out


@_jit
def bn_backward(x, g, mean, inv, gamma, train):
    """Returns (dx, dgamma, dbeta)."""
    n, c, h, w = x.shape
    m = n * h * w
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    dx = np.empty_like(x)
    for ci in range(c):
        sg = 0.0
        sgx = 0.0
        mu = mean[ci]
        iv = inv[ci]
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    gv = g[ni, ci, i, j]
                    sg += gv
                    sgx += gv * (x[ni, ci, i, j] - mu) * iv
        dgamma[ci] = sgx
        dbeta[ci] = sg
        a = gamma[ci] * iv
        if train:
            mg = sg / m
            mgx = sgx / m
            for ni in range(n):
                for i in range(h):
                    for j in range(w):
                        xh = (x[ni, ci, i, j] - mu) * iv
                        dx[ni, ci, i, j] = a * (g[ni, ci, i, j] - mg - xh * mgx)
        else:
            for ni in range(n):
                for i in range(h):
                    for j in range(w):
                        dx[ni, ci, i, j] = a * g[ni, ci, i, j]
    return dx, dgamma, dbeta


@_jit
def simam_energy(x, lam):
    """Returns (energy, mean, denom) with denom = 4 (var + lam) per plane."""
    n, c, h, w = x.shape
    m = h * w
    e = np.empty_like(x)
    mean = np.empty((n, c))
    denom = np.empty((n, c))
    for ni in range(n):
        for ci in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[ni, ci, i, j]
            mu = acc / m
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    d = x[ni, ci, i, j] - mu
                    acc += d * d
            den = 4.0 * (acc / (m - 1) + lam)
            mean[ni, ci] = mu
            denom[ni, ci] = den
            for i in range(h):
                for j in range(w):
                    d = x[ni, ci, i, j] - mu
                    e[ni, ci, i, j] = d * d / den + 0.5
    return e, mean, denom


@_jit
def simam_bwd(x, g, s, mean, denom):
    n, c, h, w = x.shape
    m = h * w
    dx = np.empty_like(x)
    for ni in range(n):
        for ci in range(c):
            mu = mean[ni, ci]
            den = denom[ni, ci]
            sum_ged = 0.0
            sum_gexc = 0.0
            sum_xc = 0.0
            for i in range(h):
                for j in range(w):
                    xv = x[ni, ci, i, j]
                    sv = s[ni, ci, i, j]
                    ge = g[ni, ci, i, j] * xv * sv * (1.0 - sv)
                    xc = xv - mu
                    sum_ged += ge * xc * xc
                    sum_gexc += ge * xc
                    sum_xc += xc
            gv = -sum_ged * 4.0 / (den * den)
            gvm = gv / (m - 1)
            mean_gc = 2.0 * (sum_gexc / den + gvm * sum_xc) / m
            for i in range(h):
                for j in range(w):
                    xv = x[ni, ci, i, j]
                    sv = s[ni, ci, i, j]
                    gval = g[ni, ci, i, j]
                    ge = gval * xv * sv * (1.0 - sv)
                    xc = xv - mu
                    dx[ni, ci, i, j] = gval * sv + 2.0 * xc * (ge / den + gvm) - mean_gc
    return dx
