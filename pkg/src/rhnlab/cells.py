"""Forward dynamics of the recurrent cells.

Every step function accepts a single vector (shape ``(m,)``) or a batch
(shape ``(B, m)``); weights multiply from the right as ``x @ W.T`` so the same
code serves both. Families:

* ``rnn``: ``y = f(W x + R y_prev + b)``
* ``rhn``: recurrent highway transition of depth ``L`` (stacked highway
  micro-layers, input enters layer 1 only by default)
* ``dt`` / ``dts``: deep-transition RNN, optionally with skip connections from
  the previous state into every layer after the first
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import singledispatch

import numpy as np
from scipy.special import expit

from .numerics import ContractError, RngStream, gaussian_sample, uniform_sample

FAMILIES = ("rnn", "rhn", "dt", "dts")


class NumericFault(ArithmeticError):
    """Non-finite value produced inside a recurrence; carries its provenance."""

    def __init__(self, message, layer=None, step=None):
        self.layer = layer
        self.step = step
        where = []
        if step is not None:
            where.append(f"time step {step}")
        if layer is not None:
            where.append(f"layer {layer}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))


def sigmoid(x):
    return expit(x)


def activate(name: str, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "logistic":
        return expit(a)
    raise ContractError(f"unknown activation {name!r}")


def activation_derivative(name: str, a=None, y=None):
    """Derivative of the activation, from the output ``y`` when available."""
    if y is None:
        y = activate(name, a)
    if name == "tanh":
        return 1.0 - y * y
    return y * (1.0 - y)


# ---------------------------------------------------------------------------
# Configuration and parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellConfig:
    """Shape and wiring of one recurrent cell.

    ``depth`` is the recurrence depth (number of micro-layers per time step);
    it must be 1 for the ``rnn`` family.
    """

    family: str
    input_dim: int
    hidden_dim: int
    depth: int = 1
    coupled_gates: bool = True
    input_first_layer_only: bool = True
    transform_bias_init: float = 0.0
    activation: str = "tanh"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown cell family {self.family!r}")
        if self.input_dim < 1 or self.hidden_dim < 1 or self.depth < 1:
            raise ContractError("input_dim, hidden_dim and depth must all be >= 1")
        if self.family == "rnn" and self.depth != 1:
            raise ContractError("the plain RNN has recurrence depth 1")
        if self.activation not in ("tanh", "logistic"):
            raise ContractError(f"unknown activation {self.activation!r}")


def RhnConfig(input_dim, hidden_dim, depth=1, coupled_gates=True,
              input_first_layer_only=True, transform_bias_init=0.0) -> CellConfig:
    return CellConfig("rhn", input_dim, hidden_dim, depth, coupled_gates,
                      input_first_layer_only, transform_bias_init)


@dataclass
class RnnParams:
    W: np.ndarray
    R: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        n, m = self.W.shape
        if self.R.shape != (n, n) or self.b.shape != (n,):
            raise ContractError("RnnParams: inconsistent shapes")

    @property
    def hidden_dim(self):
        return self.R.shape[0]

    @property
    def input_dim(self):
        return self.W.shape[1]

    @property
    def config(self) -> CellConfig:
        return CellConfig("rnn", self.input_dim, self.hidden_dim, activation=self.activation)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "R": self.R, "b": self.b}


@dataclass
class RhnParams:
    """Weights of an RHN layer. Per-layer tensors are stacked on axis 0.

    ``W_C``, ``R_C`` and ``b_C`` are ``None`` when the carry gate is coupled
    to the transform gate (``c = 1 - t``).
    """

    config: CellConfig
    W_H: np.ndarray
    W_T: np.ndarray
    R_H: np.ndarray
    R_T: np.ndarray
    b_H: np.ndarray
    b_T: np.ndarray
    W_C: np.ndarray | None = None
    R_C: np.ndarray | None = None
    b_C: np.ndarray | None = None

    def __post_init__(self):
        cfg = self.config
        n, m, L = cfg.hidden_dim, cfg.input_dim, cfg.depth
        carry = (self.W_C, self.R_C, self.b_C)
        if cfg.coupled_gates and any(a is not None for a in carry):
            raise ContractError("coupled gates take no carry-gate parameters")
        if not cfg.coupled_gates and any(a is None for a in carry):
            raise ContractError("independent carry gates need W_C, R_C and b_C")
        for name, arr in self.arrays().items():
            expected = {"W": (n, m), "R": (L, n, n), "b": (L, n)}[name[0]]
            if arr.shape != expected:
                raise ContractError(f"RhnParams.{name} has shape {arr.shape}, expected {expected}")

    @property
    def depth(self):
        return self.config.depth

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W_H": self.W_H, "W_T": self.W_T}
        if self.W_C is not None:
            out["W_C"] = self.W_C
        out.update(R_H=self.R_H, R_T=self.R_T)
        if self.R_C is not None:
            out["R_C"] = self.R_C
        out.update(b_H=self.b_H, b_T=self.b_T)
        if self.b_C is not None:
            out["b_C"] = self.b_C
        return out


@dataclass
class DtRnnParams:
    """Deep-transition RNN: ``depth`` stacked tanh layers on the recurrent path."""

    W: np.ndarray
    R: np.ndarray
    b: np.ndarray
    skip: bool = False

    def __post_init__(self):
        L, n, _ = self.R.shape
        if self.W.shape[0] != n or self.b.shape != (L, n) or self.R.shape[2] != n:
            raise ContractError("DtRnnParams: inconsistent shapes")

    @property
    def depth(self):
        return self.R.shape[0]

    @property
    def config(self) -> CellConfig:
        return CellConfig("dts" if self.skip else "dt", self.W.shape[1], self.R.shape[1], self.depth)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "R": self.R, "b": self.b}


def cell_config(p) -> CellConfig:
    return p.config


def family_of(p) -> str:
    return p.config.family


def copy_params(p, dtype=None):
    """Deep copy of any parameter container, optionally cast to ``dtype``."""
    return replace(p, **{k: v.astype(dtype or v.dtype, copy=True) for k, v in p.arrays().items()})


# ---------------------------------------------------------------------------
# Step caches
# ---------------------------------------------------------------------------


@dataclass
class StepCache:
    """Intermediate values of one time step, enough for exact backpropagation.

    ``s[0]`` is the incoming state and ``s[l]`` the output of micro-layer ``l``;
    ``h``, ``t`` and ``c`` hold the per-layer candidate and gate values (``t``
    and ``c`` stay empty for the non-gated families, where ``h`` holds the
    layer outputs). ``s_in`` is the (possibly dropout-masked) state each layer
    multiplies by its recurrent matrix.
    """

    x: np.ndarray
    s: list = field(default_factory=list)
    s_in: list = field(default_factory=list)
    h: list = field(default_factory=list)
    t: list = field(default_factory=list)
    c: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    @property
    def y(self):
        return self.s[-1]


def _layer_mask(mask, layer):
    if mask is None:
        return None
    mask = np.asarray(mask)
    if isinstance(mask, np.ndarray) and mask.ndim == 3:
        return mask[layer]
    return mask


def _as_float(a):
    # keeps extended precision when the caller supplies it
    a = np.asarray(a)
    return a if a.dtype.kind == "f" else a.astype(np.float64)


def _check_finite(arr, layer, what):
    if not np.isfinite(arr).all():
        raise NumericFault(f"non-finite {what}", layer=layer)


def _check_dims(x, y_prev, m, n):
    if x.shape[-1] != m or y_prev.shape[-1] != n:
        raise ContractError(f"expected input dim {m} and state dim {n}, "
                            f"got {x.shape[-1]} and {y_prev.shape[-1]}")


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def rnn_step(p: RnnParams, x, y_prev, hidden_mask=None):
    x = _as_float(x)
    y_prev = _as_float(y_prev)
    _check_dims(x, y_prev, p.input_dim, p.hidden_dim)
    mask = _layer_mask(hidden_mask, 0)
    s_in = y_prev if mask is None else y_prev * mask
    y = activate(p.activation, x @ p.W.T + s_in @ p.R.T + p.b)
    _check_finite(y, 1, "RNN state")
    return y, StepCache(x=x, s=[y_prev, y], s_in=[s_in], h=[y], masks=[mask])


def rhn_step(p: RhnParams, x, y_prev, hidden_mask=None):
    """One RHN time step of depth ``L``.

    ``hidden_mask`` multiplies the state entering the recurrent matrices of
    each micro-layer (shape ``(n,)``/``(B, n)`` shared by all layers, or
    ``(L, B, n)`` for one mask per layer); the carry path is never masked.
    """
    cfg = p.config
    x = _as_float(x)
    y_prev = _as_float(y_prev)
    _check_dims(x, y_prev, cfg.input_dim, cfg.hidden_dim)
    cache = StepCache(x=x, s=[y_prev])
    xh = x @ p.W_H.T
    xt = x @ p.W_T.T
    xc = x @ p.W_C.T if p.W_C is not None else None
    s = y_prev
    for layer in range(cfg.depth):
        mask = _layer_mask(hidden_mask, layer)
        s_in = s if mask is None else s * mask
        a_h = s_in @ p.R_H[layer].T + p.b_H[layer]
        a_t = s_in @ p.R_T[layer].T + p.b_T[layer]
        if layer == 0 or not cfg.input_first_layer_only:
            a_h = a_h + xh
            a_t = a_t + xt
        h = np.tanh(a_h)
        t = expit(a_t)
        if cfg.coupled_gates:
            c = 1.0 - t
        else:
            a_c = s_in @ p.R_C[layer].T + p.b_C[layer]
            if layer == 0 or not cfg.input_first_layer_only:
                a_c = a_c + xc
            c = expit(a_c)
        s = h * t + s * c
        _check_finite(s, layer + 1, "RHN intermediate state")
        cache.s.append(s)
        cache.s_in.append(s_in)
        cache.h.append(h)
        cache.t.append(t)
        cache.c.append(c)
        cache.masks.append(mask)
    return s, cache


def dt_step(p: DtRnnParams, x, y_prev, hidden_mask=None):
    """Deep-transition step; layer 1 sees ``W x``, later layers only the stack.

    With ``skip`` the previous state ``s_0`` is added (identity connection) to
    the pre-activation of every layer after the first; layer 1 already
    receives ``s_0`` through its recurrent matrix.
    """
    x = _as_float(x)
    y_prev = _as_float(y_prev)
    _check_dims(x, y_prev, p.W.shape[1], p.R.shape[1])
    cache = StepCache(x=x, s=[y_prev])
    s = y_prev
    for layer in range(p.depth):
        mask = _layer_mask(hidden_mask, layer)
        s_in = s if mask is None else s * mask
        if layer == 0:
            a = x @ p.W.T + s_in @ p.R[0].T + p.b[0]
        else:
            a = s_in @ p.R[layer].T + p.b[layer]
            if p.skip:
                a = a + y_prev
        s = np.tanh(a)
        _check_finite(s, layer + 1, "DT-RNN intermediate state")
        cache.s.append(s)
        cache.s_in.append(s_in)
        cache.h.append(s)
        cache.masks.append(mask)
    return s, cache


@singledispatch
def step(p, x, y_prev, hidden_mask=None):
    raise ContractError(f"no step function for {type(p).__name__}")


step.register(RnnParams, rnn_step)
step.register(RhnParams, rhn_step)
step.register(DtRnnParams, dt_step)


def forward_sequence(p, inputs, y0, hidden_mask=None):
    """Thread the state through ``len(inputs)`` steps; returns outputs and caches."""
    y = _as_float(y0)
    if y.shape[-1] != p.config.hidden_dim:
        raise ContractError(f"initial state has dimension {y.shape[-1]}, "
                            f"expected {p.config.hidden_dim}")
    outputs, caches = [], []
    for t, x in enumerate(inputs):
        try:
            y, cache = step(p, x, y, hidden_mask)
        except NumericFault as err:
            raise NumericFault("non-finite state", layer=err.layer, step=t) from err
        except ContractError as err:
            raise ContractError(f"time step {t}: {err}") from err
        outputs.append(y)
        caches.append(cache)
    return outputs, caches


# ---------------------------------------------------------------------------
# Initialisation and lesioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitScheme:
    """``gaussian`` (std), ``uniform`` (half-width a) or ``identity_recurrent``
    (recurrent matrices I plus gaussian off-diagonal noise of std ``scale``)."""

    kind: str
    scale: float

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "identity_recurrent"):
            raise ContractError(f"unknown init scheme {self.kind!r}")
        if not self.scale >= 0:
            raise ContractError("init scale must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "InitScheme":
        kind, _, scale = text.partition(":")
        return cls(kind.strip(), float(scale or 0.0))

    def __str__(self):
        return f"{self.kind}:{self.scale!r}"

    def draw(self, rng: RngStream, shape, recurrent=False):
        if self.kind == "uniform":
            return uniform_sample(rng, -self.scale, self.scale, shape)
        w = gaussian_sample(rng, self.scale, shape)
        if recurrent and self.kind == "identity_recurrent":
            n = shape[-1]
            idx = np.arange(n)
            w[..., idx, idx] = 1.0
        return w


def init_params(cfg: CellConfig, scheme: InitScheme, rng: RngStream):
    """Draw cell weights per ``scheme``; transform-gate biases get
    ``cfg.transform_bias_init``, all other biases start at zero.

    Tensors are drawn in a fixed order (input maps, then recurrent stacks) so a
    seed fully determines the result.
    """
    if isinstance(scheme, str):
        scheme = InitScheme.parse(scheme)
    n, m, L = cfg.hidden_dim, cfg.input_dim, cfg.depth
    if cfg.family == "rnn":
        return RnnParams(W=scheme.draw(rng, (n, m)), R=scheme.draw(rng, (n, n), True),
                         b=np.zeros(n), activation=cfg.activation)
    if cfg.family in ("dt", "dts"):
        return DtRnnParams(W=scheme.draw(rng, (n, m)), R=scheme.draw(rng, (L, n, n), True),
                           b=np.zeros((L, n)), skip=cfg.family == "dts")
    coupled = cfg.coupled_gates
    W_H = scheme.draw(rng, (n, m))
    W_T = scheme.draw(rng, (n, m))
    W_C = None if coupled else scheme.draw(rng, (n, m))
    R_H = scheme.draw(rng, (L, n, n), True)
    R_T = scheme.draw(rng, (L, n, n), True)
    R_C = None if coupled else scheme.draw(rng, (L, n, n), True)
    return RhnParams(
        config=cfg, W_H=W_H, W_T=W_T, W_C=W_C, R_H=R_H, R_T=R_T, R_C=R_C,
        b_H=np.zeros((L, n)), b_T=np.full((L, n), float(cfg.transform_bias_init)),
        b_C=None if coupled else np.zeros((L, n)),
    )


def set_lesion_bias(p: RhnParams, layer: int, beta: float) -> RhnParams:
    """Copy of ``p`` whose transform-gate bias in ``layer`` (1-based) is ``beta``.

    A large negative ``beta`` pushes that micro-layer to pure carry in coupled
    mode. With independent gates the carry bias is set to ``-beta`` as well so
    the layer still reduces to (approximately) the identity.
    """
    if not isinstance(p, RhnParams):
        raise ContractError("lesioning applies to RHN parameters only")
    if not 1 <= layer <= p.depth:
        raise ContractError(f"layer {layer} out of range 1..{p.depth}")
    out = copy_params(p)
    out.b_T[layer - 1] = beta
    if out.b_C is not None:
        out.b_C[layer - 1] = -beta
    return out
