"""Flat ``key = value`` experiment files.

Blank lines and ``#`` comments are ignored. Every key must be one of the
fields of :class:`ExperimentSpec`; unknown keys are rejected. Tuples are
comma-separated. See ``KEY_HELP`` for the meaning of each key.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .cells import CellConfig
from .numerics import ContractError
from .train import TrainConfig


@dataclass(frozen=True)
class ExperimentSpec:
    run_id: str = "run"
    out_dir: str = "out"
    seed: int = 0
    # model
    family: str = "rhn"
    hidden_dim: int = 32
    depth: int = 1
    embed_dim: int = 0
    coupled_gates: bool = True
    input_first_layer_only: bool = True
    transform_bias_init: float = 0.0
    activation: str = "tanh"
    init: str = "uniform:0.04"
    # data
    data: str = ""
    data_level: str = "character"
    data_size: int = 100_000
    split: tuple = (0.9, 0.05, 0.05)
    # training
    lr: float = 0.2
    lr_decay: float = 1.0
    decay_start_epoch: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 10.0
    batch_size: int = 20
    seq_len: int = 35
    max_epochs: int = 1
    dropout_embed: float = 0.0
    dropout_input: float = 0.0
    dropout_hidden: float = 0.0
    dropout_output: float = 0.0
    per_layer_hidden_masks: bool = False
    weight_tying: bool = False
    # sweeps
    archs: tuple = ("rhn", "dt", "dts")
    depths: tuple = (1, 2, 4)
    budgets: tuple = (3000, 6000, 12000)
    budget: int = 200_000
    n_settings: int = 60
    seeds: tuple = (0,)
    patience: int = 100
    lesion_bias: float = -20.0

    def cell_config(self, input_dim: int) -> CellConfig:
        return CellConfig(self.family, input_dim, self.hidden_dim, self.depth,
                          self.coupled_gates, self.input_first_layer_only,
                          self.transform_bias_init, self.activation)

    def train_config(self) -> TrainConfig:
        names = TrainConfig.field_names()
        return TrainConfig(**{k: getattr(self, k) for k in names if hasattr(self, k)})


KEY_HELP = {
    "run_id": "label written into checkpoints",
    "out_dir": "directory for CSVs and checkpoints (overridden by --out)",
    "seed": "master seed (overridden by --seed)",
    "family": "cell family: rhn, rnn, dt or dts",
    "hidden_dim": "units per recurrence layer",
    "depth": "recurrence depth (micro-layers per time step)",
    "embed_dim": "embedding width for symbol data; 0 means the vocabulary size",
    "coupled_gates": "carry gate tied to 1 - transform gate",
    "input_first_layer_only": "feed the input to the first micro-layer only",
    "transform_bias_init": "initial transform-gate bias",
    "activation": "plain-RNN nonlinearity: tanh or logistic",
    "init": "weight init, gaussian:STD, uniform:A or identity_recurrent:STD",
    "data": "text file, piano-roll directory, synthetic-text or synthetic-chorales",
    "data_level": "character, word or pianoroll",
    "data_size": "size of synthetic data (characters or sequences)",
    "split": "train,val,test fractions",
    "lr": "initial learning rate",
    "lr_decay": "divisor applied per epoch once decay starts",
    "decay_start_epoch": "first epoch with a decayed learning rate",
    "momentum": "heavy-ball momentum",
    "weight_decay": "L2 coefficient added to the gradient",
    "clip_norm": "global gradient-norm clip; 0 disables",
    "batch_size": "parallel streams / sequences per step",
    "seq_len": "truncated BPTT window",
    "max_epochs": "training epochs",
    "dropout_embed": "drop probability for whole embedding rows",
    "dropout_input": "drop probability for cell inputs",
    "dropout_hidden": "drop probability for the recurrent state",
    "dropout_output": "drop probability before the output projection",
    "per_layer_hidden_masks": "separate hidden mask per micro-layer",
    "weight_tying": "share embedding and output projection",
    "archs": "sweep architectures",
    "depths": "depths for sweep and depth-sweep",
    "budgets": "sweep parameter budget per depth",
    "budget": "depth-sweep parameter budget",
    "n_settings": "random hyperparameter settings per seed",
    "seeds": "seeds for sweep and depth-sweep",
    "patience": "sweep early-stop patience in epochs",
    "lesion_bias": "transform bias used by lesion",
}


def _convert(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes"):
                return True
            if low in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return text
    except ValueError as err:
        raise ContractError(f"bad value for {key}: {text!r}") from err


def parse_spec(text: str, base: ExperimentSpec | None = None) -> ExperimentSpec:
    base = base or ExperimentSpec()
    known = {f.name for f in fields(ExperimentSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ContractError(f"line {lineno}: expected key = value")
        if key not in known:
            raise ContractError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(value.strip(), getattr(base, key), key)
    spec = replace(base, **values)
    validate(spec)
    return spec


def load_spec(path) -> ExperimentSpec:
    with open(path) as fh:
        return parse_spec(fh.read())


def dump_spec(spec: ExperimentSpec) -> str:
    lines = []
    for f in fields(ExperimentSpec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def validate(spec: ExperimentSpec):
    if spec.data_level not in ("character", "word", "pianoroll"):
        raise ContractError(f"unknown data_level {spec.data_level!r}")
    if len(spec.split) != 3 or abs(sum(spec.split) - 1.0) > 1e-9:
        raise ContractError("split needs three fractions summing to 1")
    spec.train_config()  # range checks live there
    spec.cell_config(max(spec.embed_dim, 1))
    for arch in spec.archs:
        if arch not in ("rhn", "rnn", "dt", "dts"):
            raise ContractError(f"unknown architecture {arch!r}")
