"""Exact backpropagation through time, a finite-difference oracle and clipping.

The backward kernels are written out by hand for each cell family. For the
RHN the per-layer backward pass is the transpose of the layer Jacobian
``diag(c) + H' diag(t) + C' diag(s_prev) + T' diag(h)`` with an extra
``-T'``-shaped correction when the carry gate is coupled (``c = 1 - t``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import DtRnnParams, NumericFault, RhnParams, RnnParams, activation_derivative, step
from .data import Batch
from .losses import bernoulli_batch, xent_batch
from .numerics import ContractError

Gradients = dict  # name -> ndarray, congruent with Model.arrays()


def zeros_like(arrays: dict) -> Gradients:
    return {k: np.zeros_like(v) for k, v in arrays.items()}


def _acc_outer(g, d, v):
    """``g += d^T v`` for batches, ``outer(d, v)`` for single vectors."""
    if d.ndim == 1:
        g += np.outer(d, v)
    else:
        g += d.T @ v


def _acc_bias(g, d):
    g += d if d.ndim == 1 else d.sum(axis=0)


# ---------------------------------------------------------------------------
# Per-step backward kernels. Each returns (dx, dy_prev) and accumulates
# parameter gradients into ``g`` (keys as in ``params.arrays()``).
# ---------------------------------------------------------------------------


def rnn_step_backward(p: RnnParams, cache, dy, g):
    y = cache.s[1]
    da = dy * activation_derivative(p.activation, y=y)
    _acc_outer(g["W"], da, cache.x)
    _acc_outer(g["R"], da, cache.s_in[0])
    _acc_bias(g["b"], da)
    dy_prev = da @ p.R
    if cache.masks[0] is not None:
        dy_prev = dy_prev * cache.masks[0]
    return da @ p.W, dy_prev


def rhn_step_backward(p: RhnParams, cache, dy, g):
    cfg = p.config
    coupled = cfg.coupled_gates
    ds = dy
    in_h = in_t = in_c = 0.0
    for layer in reversed(range(cfg.depth)):
        s_prev = cache.s[layer]
        s_in = cache.s_in[layer]
        h, t, c = cache.h[layer], cache.t[layer], cache.c[layer]
        dh = ds * t
        dt = ds * h
        dc = ds * s_prev
        ds_prev = ds * c
        if coupled:
            dt = dt - dc
        da_h = dh * (1.0 - h * h)
        da_t = dt * t * (1.0 - t)
        _acc_outer(g["R_H"][layer], da_h, s_in)
        _acc_outer(g["R_T"][layer], da_t, s_in)
        _acc_bias(g["b_H"][layer], da_h)
        _acc_bias(g["b_T"][layer], da_t)
        ds_in = da_h @ p.R_H[layer] + da_t @ p.R_T[layer]
        if not coupled:
            da_c = dc * c * (1.0 - c)
            _acc_outer(g["R_C"][layer], da_c, s_in)
            _acc_bias(g["b_C"][layer], da_c)
            ds_in = ds_in + da_c @ p.R_C[layer]
        if layer == 0 or not cfg.input_first_layer_only:
            in_h = in_h + da_h
            in_t = in_t + da_t
            if not coupled:
                in_c = in_c + da_c
        mask = cache.masks[layer]
        ds = ds_prev + (ds_in if mask is None else ds_in * mask)
    _acc_outer(g["W_H"], in_h, cache.x)
    _acc_outer(g["W_T"], in_t, cache.x)
    dx = in_h @ p.W_H + in_t @ p.W_T
    if not coupled:
        _acc_outer(g["W_C"], in_c, cache.x)
        dx = dx + in_c @ p.W_C
    return dx, ds


def dt_step_backward(p: DtRnnParams, cache, dy, g):
    ds = dy
    skip = 0.0
    dx = None
    for layer in reversed(range(p.depth)):
        s = cache.h[layer]
        da = ds * (1.0 - s * s)
        _acc_outer(g["R"][layer], da, cache.s_in[layer])
        _acc_bias(g["b"][layer], da)
        ds = da @ p.R[layer]
        if cache.masks[layer] is not None:
            ds = ds * cache.masks[layer]
        if layer == 0:
            _acc_outer(g["W"], da, cache.x)
            dx = da @ p.W
        elif p.skip:
            skip = skip + da
    return dx, ds + skip


_BACKWARD = {RnnParams: rnn_step_backward, RhnParams: rhn_step_backward,
             DtRnnParams: dt_step_backward}


def step_backward(p, cache, dy, g):
    try:
        kernel = _BACKWARD[type(p)]
    except KeyError:
        raise ContractError(f"no backward kernel for {type(p).__name__}") from None
    return kernel(p, cache, dy, g)


def backward_sequence(p, caches, dys, g=None):
    """Reverse pass over a cached cell trajectory.

    ``dys[t]`` is the loss gradient arriving directly at output ``t``. Returns
    input gradients per step, the gradient w.r.t. the initial state, and the
    cell parameter gradients.
    """
    if g is None:
        g = zeros_like(p.arrays())
    if len(dys) != len(caches):
        raise ContractError("one output gradient per cached step is required")
    dxs = [None] * len(caches)
    carry = None
    for t in reversed(range(len(caches))):
        if caches[t] is None:
            raise ContractError(f"missing cache for time step {t}")
        dy = dys[t] if carry is None else dys[t] + carry
        dxs[t], carry = step_backward(p, caches[t], dy, g)
    return dxs, carry, g


# ---------------------------------------------------------------------------
# Whole-model windows
# ---------------------------------------------------------------------------


@dataclass
class WindowResult:
    loss: float
    count: float
    y_final: np.ndarray
    caches: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    dlogits: list = field(default_factory=list)
    x_rows: list = field(default_factory=list)


def _cell_input(model, inputs_t, masks):
    heads = model.heads
    if model.loss_kind == "xent":
        x = heads.E[inputs_t]
        if masks is not None and masks.embed is not None:
            x = x * masks.embed[np.arange(len(inputs_t)), inputs_t][:, None]
    else:
        x = np.asarray(inputs_t, dtype=np.float64)
    if masks is not None and masks.input is not None:
        x = x * masks.input
    return x


def _check_batch(model, batch, loss_kind):
    if loss_kind is not None and loss_kind != model.loss_kind:
        raise ContractError(f"model is scored with {model.loss_kind!r}, not {loss_kind!r}")
    if model.loss_kind == "xent" and batch.inputs.ndim != 2:
        raise ContractError("symbol batches have shape (T, B)")
    if model.loss_kind == "bernoulli" and batch.inputs.ndim != 3:
        raise ContractError("vector batches have shape (T, B, D)")


def forward_window(model, batch: Batch, y0=None, masks=None, keep=True, loss_kind=None):
    """Score one window: summed loss over time and batch (weighted), final state."""
    _check_batch(model, batch, loss_kind)
    T, B = batch.inputs.shape[:2]
    n = model.config.hidden_dim
    proj, bias = model.heads.projection, model.heads.P_b
    y = np.zeros((B, n), dtype=proj.dtype) if y0 is None else np.asarray(y0, dtype=proj.dtype)
    hidden_mask = None if masks is None else masks.hidden
    out_mask = None if masks is None else masks.output
    score = xent_batch if model.loss_kind == "xent" else bernoulli_batch
    res = WindowResult(loss=0.0, count=0.0, y_final=y)
    for t in range(T):
        x = _cell_input(model, batch.inputs[t], masks)
        try:
            y, cache = step(model.cell, x, y, hidden_mask)
        except NumericFault as err:
            raise NumericFault("non-finite state", layer=err.layer, step=t) from err
        o = y if out_mask is None else y * out_mask
        logits = o @ proj.T + bias
        w = None if batch.weights is None else batch.weights[t]
        loss_t, dlogits = score(logits, batch.targets[t], w)
        if not np.isfinite(loss_t):
            raise NumericFault("non-finite loss", step=t)
        res.loss += loss_t
        res.count += B if w is None else float(w.sum())
        if keep:
            res.caches.append(cache)
            res.outputs.append(o)
            res.dlogits.append(dlogits)
    res.y_final = y
    return res


def backward_window(model, batch: Batch, res: WindowResult, masks=None) -> Gradients:
    names = model.arrays()
    g = zeros_like(names)
    cell_g = {k[5:]: v for k, v in g.items() if k.startswith("cell.")}
    heads = model.heads
    proj_key = "head.E" if heads.tied else "head.P"
    proj = heads.projection
    out_mask = None if masks is None else masks.output
    in_mask = None if masks is None else masks.input
    emb_mask = None if masks is None else masks.embed
    carry = None
    B = batch.inputs.shape[1]
    rows = np.arange(B)
    for t in reversed(range(len(res.caches))):
        dlog = res.dlogits[t]
        g[proj_key] += dlog.T @ res.outputs[t]
        g["head.P_b"] += dlog.sum(axis=0)
        dy = dlog @ proj
        if out_mask is not None:
            dy = dy * out_mask
        if carry is not None:
            dy = dy + carry
        dx, carry = step_backward(model.cell, res.caches[t], dy, cell_g)
        if model.loss_kind == "xent":
            if in_mask is not None:
                dx = dx * in_mask
            idx = batch.inputs[t]
            if emb_mask is not None:
                dx = dx * emb_mask[rows, idx][:, None]
            np.add.at(g["head.E"], idx, dx)
    return g


def bptt(model, batch: Batch, loss_kind=None, y0=None, masks=None):
    """Total loss of the window and its exact gradient for every parameter."""
    res = forward_window(model, batch, y0=y0, masks=masks, keep=True, loss_kind=loss_kind)
    return res.loss, backward_window(model, batch, res, masks)


def bptt_window(model, batch: Batch, y0=None, masks=None):
    """Like :func:`bptt` but also returns the forward record (final state, caches)."""
    res = forward_window(model, batch, y0=y0, masks=masks, keep=True)
    return res, backward_window(model, batch, res, masks)


# ---------------------------------------------------------------------------
# Oracle and clipping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FdConfig:
    """Central differences with step ``eps``. With ``extended`` the probing
    forward passes run in numpy's long double, which takes float64 rounding
    of the loss out of the difference quotient."""

    eps: float = 1e-5
    extended: bool = True

    def __post_init__(self):
        if not 1e-8 <= self.eps <= 1e-3:
            raise ContractError("finite-difference eps must lie in [1e-8, 1e-3]")


def fd_gradient(model, batch: Batch, loss_kind=None, cfg: FdConfig = FdConfig(),
                y0=None, masks=None) -> Gradients:
    """Central differences of the window loss, one scalar parameter at a time."""
    probe = model.copy(np.longdouble if cfg.extended else None)
    arrays = probe.arrays()
    g = zeros_like(arrays)

    def loss():
        return forward_window(probe, batch, y0=y0, masks=masks, keep=False,
                              loss_kind=loss_kind).loss

    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        gflat = g[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + cfg.eps
                up = loss()
                flat[i] = orig - cfg.eps
                down = loss()
            except NumericFault as err:
                raise NumericFault(f"non-finite loss while probing {name}[{i}]") from err
            finally:
                flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericFault(f"non-finite loss while probing {name}[{i}]")
            gflat[i] = (up - down) / (2.0 * cfg.eps)
    return {k: v.astype(np.float64) for k, v in g.items()}


def global_norm(g: Gradients) -> float:
    return float(np.sqrt(sum(float(np.sum(v * v)) for v in g.values())))


def clip_global_norm(g: Gradients, max_norm: float):
    """Rescale all tensors jointly so the global L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(g)
    if norm <= max_norm:
        return g, 1.0
    scale = max_norm / norm
    return {k: v * scale for k, v in g.items()}, scale


def max_relative_error(g1: Gradients, g2: Gradients) -> float:
    worst = 0.0
    for k in g1:
        a, b = g1[k], g2[k]
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12))))
    return worst
