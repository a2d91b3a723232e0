"""Fused forward/backward kernels for mask-free training windows on vector
data (Bernoulli outputs): coupled-gate RHNs and DT / DT(S)-RNNs with tanh.

These compute the same window loss and gradient as ``grad.bptt_window`` but
in one compiled call per window, which removes the per-step Python overhead
that dominates the small random-search models. ``grad.bptt_window`` stays the
reference; tests hold the two to rounding-level agreement.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .cells import DtRnnParams, NumericFault, RhnParams


def eligible(model, masks) -> bool:
    if masks is not None or model.loss_kind != "bernoulli" or model.heads.P is None:
        return False
    if any(a.dtype != np.float64 for a in model.arrays().values()):
        return False
    cell = model.cell
    if isinstance(cell, DtRnnParams):
        return True
    if isinstance(cell, RhnParams):
        cfg = cell.config
        return cfg.coupled_gates and cfg.input_first_layer_only and cfg.activation == "tanh"
    return False


@njit(cache=True)
def _tanh(x):
    # one expm1 instead of libm tanh, which is several times slower here;
    # within a few ulp of np.tanh, and |x| > 20 rounds to +-1 anyway
    if x > 20.0:
        return 1.0
    if x < -20.0:
        return -1.0
    e = math.expm1(2.0 * x)
    return e / (e + 2.0)


@njit(cache=True)
def _head(z, y, w):
    """Summed Bernoulli NLL of one step; ``z`` is overwritten by dloss/dz."""
    B, D = z.shape
    loss = 0.0
    for b in range(B):
        for j in range(D):
            v = z[b, j]
            nll = max(v, 0.0) + math.log1p(math.exp(-abs(v))) - y[b, j] * v
            g = 1.0 / (1.0 + math.exp(-v)) - y[b, j]
            loss += nll * w[b]
            z[b, j] = g * w[b]
    return loss


@njit(cache=True)
def _rhn_window(X, Y, Wt, y0, W_H, W_T, R_H, R_T, b_H, b_T, P, P_b):
    # H and T weights side by side, so each layer costs one matmul each way
    T, B, _ = X.shape
    L, n, _ = R_H.shape
    m = W_H.shape[1]
    S = np.empty((T, L + 1, B, n))
    H = np.empty((T, L, B, n))
    G = np.empty((T, L, B, n))
    DZ = np.empty((T, B, P.shape[0]))
    Wx = np.empty((m, 2 * n))
    Wx[:, :n] = W_H.T
    Wx[:, n:] = W_T.T
    Rf = np.empty((L, n, 2 * n))  # forward: s @ [R_H^T | R_T^T]
    Rb = np.empty((L, 2 * n, n))  # backward: [da_h | da_t] @ [R_H ; R_T]
    for l in range(L):
        Rf[l, :, :n] = R_H[l].T
        Rf[l, :, n:] = R_T[l].T
        Rb[l, :n] = R_H[l]
        Rb[l, n:] = R_T[l]
    Pt = np.ascontiguousarray(P.T)
    gates = np.zeros(L)
    loss = 0.0
    finite = True
    s = y0.copy()
    for t in range(T):
        S[t, 0] = s
        ax = np.dot(X[t], Wx)
        for l in range(L):
            a = np.dot(s, Rf[l])
            acc = 0.0
            for b in range(B):
                for i in range(n):
                    vh = a[b, i] + b_H[l, i]
                    vt = a[b, n + i] + b_T[l, i]
                    if l == 0:
                        vh += ax[b, i]
                        vt += ax[b, n + i]
                    h = _tanh(vh)
                    g = 1.0 / (1.0 + math.exp(-vt))
                    H[t, l, b, i] = h
                    G[t, l, b, i] = g
                    acc += g
                    s[b, i] = h * g + s[b, i] * (1.0 - g)
                    if not np.isfinite(s[b, i]):
                        finite = False
            gates[l] += acc / (B * n)
            S[t, l + 1] = s
            if not finite:
                return loss, False, gates, None
        z = np.dot(s, Pt) + P_b
        loss += _head(z, Y[t], Wt[t])
        DZ[t] = z

    gWx = np.zeros((2 * n, m))
    gR = np.zeros((L, 2 * n, n))
    gb = np.zeros((L, 2 * n))
    gP = np.zeros_like(P)
    gP_b = np.zeros_like(P_b)
    carry = np.zeros((B, n))
    da = np.empty((B, 2 * n))
    for t in range(T - 1, -1, -1):
        dz = DZ[t]
        gP += np.dot(dz.T, S[t, L])
        gP_b += dz.sum(axis=0)
        ds = np.dot(dz, P) + carry
        for l in range(L - 1, -1, -1):
            s_prev = S[t, l]
            for b in range(B):
                for i in range(n):
                    h = H[t, l, b, i]
                    g = G[t, l, b, i]
                    d = ds[b, i]
                    dg = d * h - d * s_prev[b, i]
                    da[b, i] = d * g * (1.0 - h * h)
                    da[b, n + i] = dg * g * (1.0 - g)
                    ds[b, i] = d * (1.0 - g)
            gR[l] += np.dot(da.T, s_prev)
            gb[l] += da.sum(axis=0)
            ds += np.dot(da, Rb[l])
            if l == 0:
                gWx += np.dot(da.T, X[t])
        carry = ds
    grads = (gWx[:n].copy(), gWx[n:].copy(), gR[:, :n].copy(), gR[:, n:].copy(),
             gb[:, :n].copy(), gb[:, n:].copy(), gP, gP_b)
    return loss, True, gates, grads


@njit(cache=True)
def _dt_window(X, Y, Wt, y0, W, R, bias, skip, P, P_b):
    T, B, _ = X.shape
    L, n, _ = R.shape
    S = np.empty((T, L + 1, B, n))
    DZ = np.empty((T, B, P.shape[0]))
    Wtr = np.ascontiguousarray(W.T)
    Pt = np.ascontiguousarray(P.T)
    Rt = np.empty_like(R)
    for l in range(L):
        Rt[l] = R[l].T
    loss = 0.0
    s = y0.copy()
    for t in range(T):
        S[t, 0] = s
        for l in range(L):
            if l == 0:
                a = np.dot(X[t], Wtr) + np.dot(s, Rt[0]) + bias[0]
            else:
                a = np.dot(s, Rt[l]) + bias[l]
                if skip:
                    a += S[t, 0]
            s = np.empty((B, n))
            for b in range(B):
                for i in range(n):
                    s[b, i] = _tanh(a[b, i])
            if not np.all(np.isfinite(s)):
                return loss, False, None
            S[t, l + 1] = s
        z = np.dot(s, Pt) + P_b
        loss += _head(z, Y[t], Wt[t])
        DZ[t] = z

    gW = np.zeros_like(W)
    gR = np.zeros_like(R)
    gb = np.zeros_like(bias)
    gP = np.zeros_like(P)
    gP_b = np.zeros_like(P_b)
    carry = np.zeros((B, n))
    for t in range(T - 1, -1, -1):
        dz = DZ[t]
        gP += np.dot(dz.T, S[t, L])
        gP_b += dz.sum(axis=0)
        ds = np.dot(dz, P) + carry
        skip_acc = np.zeros((B, n))
        for l in range(L - 1, -1, -1):
            s = S[t, l + 1]
            da = ds * (1.0 - s * s)
            gR[l] += np.dot(da.T, S[t, l])
            gb[l] += da.sum(axis=0)
            ds = np.dot(da, R[l])
            if l == 0:
                gW += np.dot(da.T, X[t])
            elif skip:
                skip_acc += da
        carry = ds + skip_acc
    return loss, True, (gW, gR, gb, gP, gP_b)


def window(model, batch, y0=None):
    """``(loss, count, gradients, gate_sums)`` for one window.

    ``gate_sums[l]`` is the sum over time steps of layer ``l``'s mean
    transform gate (``None`` for DT cells). Raises :class:`NumericFault` on a
    non-finite state, as the reference path does.
    """
    X = np.ascontiguousarray(batch.inputs, dtype=np.float64)
    Y = np.ascontiguousarray(batch.targets, dtype=np.float64)
    T, B = X.shape[:2]
    cell, heads = model.cell, model.heads
    n = model.config.hidden_dim
    y = np.zeros((B, n)) if y0 is None else np.array(y0, dtype=np.float64)
    W = np.ones((T, B)) if batch.weights is None else np.ascontiguousarray(batch.weights, float)
    count = float(W.sum()) if batch.weights is not None else float(T * B)
    if isinstance(cell, RhnParams):
        loss, ok, gates, grads = _rhn_window(X, Y, W, y, cell.W_H, cell.W_T, cell.R_H, cell.R_T,
                                             cell.b_H, cell.b_T, heads.P, heads.P_b)
        names = ("cell.W_H", "cell.W_T", "cell.R_H", "cell.R_T", "cell.b_H", "cell.b_T",
                 "head.P", "head.P_b")
    else:
        loss, ok, grads = _dt_window(X, Y, W, y, cell.W, cell.R, cell.b, cell.skip,
                                     heads.P, heads.P_b)
        gates = None
        names = ("cell.W", "cell.R", "cell.b", "head.P", "head.P_b")
    if not ok or not math.isfinite(loss):
        raise NumericFault("non-finite state or loss in fused window")
    return loss, count, dict(zip(names, grads)), gates
