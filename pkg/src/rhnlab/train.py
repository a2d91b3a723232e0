"""Training protocol: SGD with momentum, schedules, variational dropout, metrics.

Window losses are summed over time and averaged over the batch before the
gradient step, the usual convention for truncated-BPTT language models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import fastpath
from .data import Batch, BatchStream
from .grad import bptt_window, clip_global_norm, forward_window, global_norm
from .losses import metrics
from .numerics import ContractError, RngStream

# use the fused kernels of ``fastpath`` for eligible windows
FAST_KERNELS = True


@dataclass
class TrainConfig:
    lr: float = 0.2
    lr_decay: float = 1.0
    decay_start_epoch: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 10.0  # <= 0 disables clipping
    batch_size: int = 20
    seq_len: int = 35
    max_epochs: int = 1
    dropout_embed: float = 0.0
    dropout_input: float = 0.0
    dropout_hidden: float = 0.0
    dropout_output: float = 0.0
    per_layer_hidden_masks: bool = False
    weight_tying: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ContractError("learning rate must be non-negative")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ContractError("batch_size and seq_len must be >= 1")
        if self.lr_decay < 1:
            raise ContractError("lr_decay must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        for name in ("dropout_embed", "dropout_input", "dropout_hidden", "dropout_output"):
            p = getattr(self, name)
            if not 0 <= p < 1:
                raise ContractError(f"{name} must lie in [0, 1), got {p}")

    @property
    def uses_dropout(self) -> bool:
        return any(getattr(self, f"dropout_{s}") > 0 for s in ("embed", "input", "hidden", "output"))

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class OptimState:
    velocity: dict
    epoch: int = 0
    steps: int = 0

    @classmethod
    def for_model(cls, model) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in model.arrays().items()})


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    if epoch < cfg.decay_start_epoch:
        return cfg.lr
    return cfg.lr / cfg.lr_decay ** (epoch - cfg.decay_start_epoch + 1)


def sgd_momentum_step(params: dict, g: dict, st: OptimState, cfg: TrainConfig, lr=None):
    """Heavy-ball update in place: ``v <- mu v - lr (g + wd theta); theta <- theta + v``."""
    lr = cfg.lr if lr is None else lr
    for name, theta in params.items():
        grad = g[name]
        if grad.shape != theta.shape:
            raise ContractError(f"gradient for {name} has shape {grad.shape}, expected {theta.shape}")
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * theta
        v = st.velocity[name]
        v *= cfg.momentum
        v -= lr * grad
        theta += v
    st.steps += 1
    return params, st


# ---------------------------------------------------------------------------
# Variational dropout
# ---------------------------------------------------------------------------


@dataclass
class DropoutMasks:
    """Inverted-dropout masks for one sequence; reused at every time step.

    ``embed`` has shape (B, V) and drops whole symbol types; ``input`` (B, m)
    scales the cell input; ``hidden`` (B, n), or (L, B, n) with per-layer
    masks, scales the state entering the recurrent matrices; ``output``
    (B, n) scales the state entering the output projection.
    """

    embed: np.ndarray | None = None
    input: np.ndarray | None = None
    hidden: np.ndarray | None = None
    output: np.ndarray | None = None


def _bernoulli_mask(rng, p, shape):
    if not 0 <= p < 1:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape)
    keep = 1.0 - p
    u = rng.random(int(np.prod(shape))).reshape(shape)
    return np.where(u < keep, 1.0 / keep, 0.0)


def sample_variational_masks(cfg: TrainConfig, shapes: dict, rng: RngStream) -> DropoutMasks:
    """Sample one mask per site. ``shapes`` maps site name to mask shape;
    sites are drawn in the fixed order embed, input, hidden, output."""
    out = DropoutMasks()
    for site in ("embed", "input", "hidden", "output"):
        if site in shapes and shapes[site] is not None:
            setattr(out, site, _bernoulli_mask(rng, getattr(cfg, f"dropout_{site}"), shapes[site]))
    return out


def mask_shapes(model, cfg: TrainConfig, batch_size: int) -> dict:
    mc = model.config
    B, n = batch_size, mc.hidden_dim
    hidden = (mc.depth, B, n) if cfg.per_layer_hidden_masks else (B, n)
    return {
        "embed": (B, model.heads.out_dim) if model.loss_kind == "xent" else None,
        "input": (B, mc.input_dim),
        "hidden": hidden,
        "output": (B, n),
    }


# ---------------------------------------------------------------------------
# Epochs
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_nll: float
    grad_norm_mean: float
    grad_norm_max: float
    clipped_fraction: float
    n_windows: int
    gate_means: list = field(default_factory=list)

    @property
    def train_bpc(self) -> float:
        return self.train_nll / math.log(2.0)


def _windows(stream):
    if isinstance(stream, BatchStream):
        stream.cursor = 0
        return stream, True
    return list(stream), False


def train_epoch(model, stream, cfg: TrainConfig, st: OptimState, rng: RngStream,
                epoch: int | None = None) -> EpochStats:
    """One pass over ``stream`` (a :class:`BatchStream` whose hidden state is
    carried between windows, or an iterable of independent :class:`Batch`).

    Each window: sample masks, forward, backprop, clip, momentum step. The
    returned ``train_nll`` is the mean loss per scored target (nats).
    """
    epoch = st.epoch if epoch is None else epoch
    lr = lr_at_epoch(cfg, epoch)
    windows, carried = _windows(stream)
    params = model.arrays()
    total = count = 0.0
    norms = []
    clipped = 0
    gate_sum = np.zeros(model.config.depth)
    gate_n = 0
    state = None  # each epoch starts from the zero state
    for batch in windows:
        B = batch.batch_size
        masks = None
        if cfg.uses_dropout:
            masks = sample_variational_masks(cfg, mask_shapes(model, cfg, B), rng)
        y0 = state if carried else None
        if FAST_KERNELS and not carried and fastpath.eligible(model, masks):
            loss, n_scored, g, gates = fastpath.window(model, batch, y0)
            if gates is not None:
                gate_sum += gates
                gate_n += batch.length
        else:
            res, g = bptt_window(model, batch, y0=y0, masks=masks)
            loss, n_scored = res.loss, res.count
            if carried:
                state = res.y_final
            if model.family == "rhn":
                for cache in res.caches:
                    gate_sum += [float(np.mean(t)) for t in cache.t]
                    gate_n += 1
        total += loss
        count += n_scored
        for k in g:
            g[k] /= B
        norms.append(global_norm(g))
        if cfg.clip_norm and cfg.clip_norm > 0:
            g, scale = clip_global_norm(g, cfg.clip_norm)
            clipped += scale < 1.0
        sgd_momentum_step(params, g, st, cfg, lr)
    if carried:
        stream.state = state
    st.epoch = epoch + 1
    n = len(norms)
    return EpochStats(
        epoch=epoch, lr=lr, train_nll=float(total / count) if count else 0.0,
        grad_norm_mean=float(np.mean(norms)) if n else 0.0,
        grad_norm_max=float(np.max(norms)) if n else 0.0,
        clipped_fraction=clipped / n if n else 0.0, n_windows=n,
        gate_means=(gate_sum / gate_n).tolist() if gate_n else [],
    )


def evaluate(model, stream, y0=None) -> dict:
    """Mask-free scoring. For a :class:`BatchStream` the state is carried
    across its windows starting from ``y0`` (zeros by default)."""
    windows, carried = _windows(stream)
    total = count = 0.0
    state = y0
    for batch in windows:
        res = forward_window(model, batch, y0=state if carried else None, keep=False)
        if carried:
            state = res.y_final
        total += res.loss
        count += res.count
    mean = float(total / count) if count else 0.0
    out = metrics(mean)
    out["count"] = count
    return out


def total_loss(model, stream) -> float:
    """Summed (not averaged) loss over every window; used by lesioning."""
    windows, carried = _windows(stream)
    total = 0.0
    state = None
    for batch in windows:
        res = forward_window(model, batch, y0=state if carried else None, keep=False)
        if carried:
            state = res.y_final
        total += res.loss
    return float(total)
