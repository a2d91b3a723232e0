"""A single recurrent layer wrapped with its input embedding and output head."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cells import CellConfig, InitScheme, copy_params, init_params
from .numerics import ContractError, RngStream

LOSS_KINDS = ("xent", "bernoulli")


@dataclass
class Heads:
    """Input embedding ``E`` (V x m) and output projection ``P`` (V x n) + bias.

    With ``tied`` the projection *is* the embedding (``P is None``; logits use
    ``E``), which requires m == n. ``E`` is ``None`` for vector-valued inputs
    such as piano-roll frames, where the frame itself is the cell input.
    """

    P_b: np.ndarray
    P: np.ndarray | None = None
    E: np.ndarray | None = None
    tied: bool = False
    loss_kind: str = "xent"

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.loss_kind!r}")
        if self.tied:
            if self.E is None or self.P is not None:
                raise ContractError("tied heads store only the embedding")
        elif self.P is None:
            raise ContractError("untied heads need an output projection")
        if self.loss_kind == "xent" and self.E is None:
            raise ContractError("symbol models need an embedding")

    @property
    def projection(self) -> np.ndarray:
        return self.E if self.tied else self.P

    @property
    def out_dim(self) -> int:
        return self.P_b.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        if self.E is not None:
            out["E"] = self.E
        if self.P is not None:
            out["P"] = self.P
        out["P_b"] = self.P_b
        return out


@dataclass
class Model:
    cell: object
    heads: Heads

    def __post_init__(self):
        cfg = self.cell.config
        proj = self.heads.projection
        if proj.shape[1] != cfg.hidden_dim:
            raise ContractError(f"output projection width {proj.shape[1]} != hidden {cfg.hidden_dim}")
        in_width = self.heads.E.shape[1] if self.heads.E is not None else self.heads.out_dim
        if in_width != cfg.input_dim:
            raise ContractError(f"input width {in_width} != cell input dim {cfg.input_dim}")

    @property
    def config(self) -> CellConfig:
        return self.cell.config

    @property
    def family(self) -> str:
        return self.cell.config.family

    @property
    def loss_kind(self) -> str:
        return self.heads.loss_kind

    def arrays(self) -> dict[str, np.ndarray]:
        """Every trainable tensor, in a fixed order, keyed ``cell.*`` / ``head.*``."""
        out = {f"cell.{k}": v for k, v in self.cell.arrays().items()}
        out.update({f"head.{k}": v for k, v in self.heads.arrays().items()})
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def copy(self, dtype=None) -> "Model":
        heads = replace(self.heads, **{k: v.astype(dtype or v.dtype, copy=True)
                                       for k, v in self.heads.arrays().items()})
        return Model(copy_params(self.cell, dtype), heads)

    def with_cell(self, cell) -> "Model":
        return Model(cell, self.heads)


def build_model(cfg: CellConfig, out_dim: int, scheme, rng: RngStream,
                embed: bool = True, tied: bool = False, loss_kind: str | None = None) -> Model:
    """Initialise cell and heads with one scheme; draw order is cell, E, P.

    ``embed`` selects symbol inputs (embedding of ``out_dim`` rows, softmax
    output by default); otherwise inputs are ``out_dim``-wide vectors scored
    with a Bernoulli likelihood.
    """
    if isinstance(scheme, str):
        scheme = InitScheme.parse(scheme)
    if loss_kind is None:
        loss_kind = "xent" if embed else "bernoulli"
    if not embed and cfg.input_dim != out_dim:
        raise ContractError("vector-input models need input_dim == out_dim")
    if tied and cfg.input_dim != cfg.hidden_dim:
        raise ContractError("weight tying needs input_dim == hidden_dim")
    cell = init_params(cfg, scheme, rng)
    E = scheme.draw(rng, (out_dim, cfg.input_dim)) if embed else None
    P = None if tied else scheme.draw(rng, (out_dim, cfg.hidden_dim))
    heads = Heads(P_b=np.zeros(out_dim), P=P, E=E, tied=tied, loss_kind=loss_kind)
    return Model(cell, heads)


def param_census(family: str, n: int, m: int, depth: int, out_dim: int, embed: bool = True,
                 tied: bool = False, coupled: bool = True) -> int:
    """Closed-form parameter count of a model built by :func:`build_model`."""
    if family == "rnn":
        cell = n * m + n * n + n
    elif family in ("dt", "dts"):
        cell = n * m + depth * (n * n + n)
    elif family == "rhn":
        gates = 2 if coupled else 3
        cell = depth * gates * (n * n + n) + gates * n * m
    else:
        raise ContractError(f"unknown family {family!r}")
    heads = out_dim
    if embed:
        heads += out_dim * m
    if not tied:
        heads += out_dim * n
    return cell + heads
