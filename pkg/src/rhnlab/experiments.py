"""Experiment drivers: width search, random-search sweeps, depth sweeps,
gate activity and lesioning. The CLI wraps these; tests call them directly.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cells import CellConfig, NumericFault, RhnParams, set_lesion_bias, step
from .data import roll_batches
from .model import build_model, param_census
from .numerics import ContractError, RngStream
from .train import OptimState, TrainConfig, evaluate, total_loss, train_epoch

SWEEP_HEADER = ["arch", "depth", "setting", "seed", "hidden", "n_params", "lr", "init_std",
                "transform_bias", "best_loss", "epochs", "diverged"]
DEPTH_HEADER = ["depth", "seed", "hidden", "n_params", "val_nll", "val_bpc"]
LESION_HEADER = ["layer", "loss", "delta"]


# ---------------------------------------------------------------------------
# Parameter budgets
# ---------------------------------------------------------------------------


def largest_width(family: str, depth: int, budget: int, input_dim, out_dim: int,
                  embed: bool = True, tied: bool = False, coupled: bool = True):
    """Largest hidden width whose exact census fits ``budget``.

    ``input_dim`` may be ``None`` to mean "same as the width" (tied or
    square embeddings). Returns ``(width, count)``.
    """
    def count(n):
        m = n if input_dim is None else input_dim
        return param_census(family, n, m, depth, out_dim, embed, tied, coupled)

    if count(1) > budget:
        raise ContractError(f"budget {budget} cannot fit a width-1 {family} of depth {depth}")
    lo, hi = 1, 2
    while count(hi) <= budget:
        lo, hi = hi, hi * 2
    while hi - lo > 1:  # census is increasing in width
        mid = (lo + hi) // 2
        if count(mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo, count(lo)


# ---------------------------------------------------------------------------
# Random-search sweep on piano rolls
# ---------------------------------------------------------------------------


@dataclass
class SweepSpec:
    archs: tuple = ("rhn", "dt", "dts")
    depths: tuple = (1, 2, 4)
    budgets: tuple = (3000, 6000, 12000)  # one parameter budget per depth
    n_settings: int = 60
    seeds: tuple = (0,)
    lr_range: tuple = (1e-4, 1.0)
    std_range: tuple = (1e-8, 1e-2)
    bias_choices: tuple = (0.0, -1.0, -2.0, -3.0)
    max_epochs: int = 1000
    patience: int = 100
    batch_size: int = 32
    momentum: float = 0.9
    clip_norm: float = 0.0
    n_train: int = 128
    n_pitches: int = 24
    seq_length: int = 32
    data_seed: int = 1234

    def __post_init__(self):
        if self.n_settings < 1:
            raise ContractError("n_settings must be >= 1")
        if not (0 < self.lr_range[0] <= self.lr_range[1]):
            raise ContractError("lr range must be positive and ordered")
        if not (0 < self.std_range[0] <= self.std_range[1]):
            raise ContractError("init-std range must be positive and ordered")
        if len(self.budgets) != len(self.depths):
            raise ContractError("need one parameter budget per depth")


def log_uniform(rng: RngStream, lo: float, hi: float, size: int = 1):
    u = rng.random(size)
    return np.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))


def sample_settings(spec: SweepSpec, seed: int) -> list[dict]:
    """Hyperparameter draws for one seed, shared by every architecture and
    depth so the comparison is paired."""
    rng = RngStream.derive(seed, 0)
    out = []
    for i in range(spec.n_settings):
        lr = float(log_uniform(rng, *spec.lr_range)[0])
        std = float(log_uniform(rng, *spec.std_range)[0])
        bias = spec.bias_choices[int(rng.random(1)[0] * len(spec.bias_choices))]
        out.append({"setting": i, "lr": lr, "init_std": std, "transform_bias": float(bias)})
    return out


def sweep_data(spec: SweepSpec):
    from .data import ChoraleSpec, synthetic_chorales

    cs = ChoraleSpec(n_pitches=spec.n_pitches, length=spec.seq_length)
    return synthetic_chorales(spec.n_train, RngStream(spec.data_seed), cs)


def fit_rolls(model, rolls, cfg: TrainConfig, max_epochs: int, patience: int, rng: RngStream):
    """Train on whole sequences until ``patience`` epochs pass without a new
    best training loss. Returns ``(best_loss, epochs_run, diverged, history)``;
    the loss is per frame, and the untrained model's loss seeds the best."""
    batches = roll_batches(rolls, cfg.batch_size)
    best = evaluate(model, batches)["nll"]
    st = OptimState.for_model(model)
    history = []
    since = 0
    diverged = False
    for epoch in range(max_epochs):
        shuffled = roll_batches(rolls, cfg.batch_size, rng)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                stats = train_epoch(model, shuffled, cfg, st, rng, epoch)
        except NumericFault:
            diverged = True
            break
        loss = stats.train_nll
        if not math.isfinite(loss):
            diverged = True
            break
        history.append(stats)
        if loss < best:
            best, since = loss, 0
        else:
            since += 1
            if since >= patience:
                break
    return best, len(history), diverged, history


def _sweep_job(args):
    spec, arch, depth, budget, setting, seed, rolls = args
    D = spec.n_pitches
    coupled = True
    n, count = largest_width(arch, depth, budget, D, D, embed=False, coupled=coupled)
    cfg = CellConfig(arch, D, n, depth, coupled_gates=coupled,
                     transform_bias_init=setting["transform_bias"] if arch == "rhn" else 0.0)
    rng = RngStream.derive(seed, 1 + setting["setting"])
    model = build_model(cfg, D, f"gaussian:{setting['init_std']!r}", rng, embed=False)
    tc = TrainConfig(lr=setting["lr"], momentum=spec.momentum, clip_norm=spec.clip_norm,
                     batch_size=spec.batch_size, seq_len=spec.seq_length, seed=seed)
    best, epochs, diverged, _ = fit_rolls(model, rolls, tc, spec.max_epochs, spec.patience,
                                          RngStream.derive(seed, 10_000 + setting["setting"]))
    row = {"arch": arch, "depth": depth, "setting": setting["setting"], "seed": seed,
           "hidden": n, "n_params": count, "lr": setting["lr"],
           "init_std": setting["init_std"], "transform_bias": setting["transform_bias"],
           "best_loss": best, "epochs": epochs, "diverged": int(diverged)}
    return row, model


def run_sweep(spec: SweepSpec, threads: int = 1, keep_models=None):
    """Every (arch, depth, setting, seed) combination; rows stably sorted.

    ``keep_models`` is an optional predicate on a row; matching trained models
    are returned alongside the rows (used for lesioning).
    """
    rolls = sweep_data(spec)
    jobs = []
    for seed in spec.seeds:
        for setting in sample_settings(spec, seed):
            for arch in spec.archs:
                for depth, budget in zip(spec.depths, spec.budgets):
                    jobs.append((spec, arch, depth, budget, setting, seed, rolls))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_job, jobs, chunksize=1))
    else:
        results = [_sweep_job(j) for j in jobs]
    order = {a: i for i, a in enumerate(spec.archs)}
    results.sort(key=lambda r: (order[r[0]["arch"]], r[0]["depth"], r[0]["seed"], r[0]["setting"]))
    rows = [r for r, _ in results]
    kept = [(r, m) for r, m in results if keep_models and keep_models(r)]
    return rows, kept


def median_best(rows, arch, depth) -> float:
    vals = [r["best_loss"] for r in rows if r["arch"] == arch and r["depth"] == depth]
    if not vals:
        raise ContractError(f"no rows for {arch} depth {depth}")
    return float(np.median(vals))


# ---------------------------------------------------------------------------
# Gate activity and lesioning
# ---------------------------------------------------------------------------


def gate_activity(model, inputs) -> np.ndarray:
    """Mean-over-units transform-gate activation, shape (layers, time).

    ``inputs`` is one sequence: symbol indices (T,) or vectors (T, D).
    """
    if not isinstance(model.cell, RhnParams):
        raise ContractError("gate activity needs an RHN model")
    cfg = model.config
    y = np.zeros(cfg.hidden_dim)
    out = np.empty((cfg.depth, len(inputs)))
    for t, item in enumerate(inputs):
        x = model.heads.E[int(item)] if model.loss_kind == "xent" else np.asarray(item, float)
        y, cache = step(model.cell, x, y)
        for layer, gate in enumerate(cache.t):
            out[layer, t] = float(np.mean(gate))
    return out


def lesion_table(model, stream, beta: float = -20.0) -> list[dict]:
    """Baseline row (``layer`` 0) plus one row per lesioned layer; ``loss`` is
    the summed training loss, ``delta`` its change over the baseline."""
    if not isinstance(model.cell, RhnParams):
        raise ContractError("lesioning needs an RHN model")
    base = total_loss(model, stream)
    rows = [{"layer": 0, "loss": base, "delta": 0.0}]
    for layer in range(1, model.config.depth + 1):
        lesioned = model.with_cell(set_lesion_bias(model.cell, layer, beta))
        loss = total_loss(lesioned, stream)
        rows.append({"layer": layer, "loss": loss, "delta": loss - base})
    return rows


# ---------------------------------------------------------------------------
# Depth sweep on a character corpus
# ---------------------------------------------------------------------------


@dataclass
class DepthSweepSpec:
    depths: tuple = (1, 3, 5)
    budget: int = 200_000
    seeds: tuple = (0, 1, 2)
    epochs: int = 1
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr=0.05, batch_size=32, seq_len=50))
    init: str = "uniform:0.04"
    transform_bias: float = -4.0
    embed_dim: int | None = None  # None: equal to the vocabulary size


def depth_widths(spec: DepthSweepSpec, vocab: int) -> list[tuple[int, int, int]]:
    """``(depth, width, count)`` for each depth at the shared budget."""
    m = spec.embed_dim or vocab
    out = []
    for d in spec.depths:
        n, c = largest_width("rhn", d, spec.budget, m, vocab, embed=True,
                             tied=spec.train.weight_tying)
        out.append((d, n, c))
    return out


def run_depth_sweep(spec: DepthSweepSpec, train_corpus, val_corpus, log=None) -> list[dict]:
    from .data import make_batches

    vocab = len(train_corpus.vocab)
    m = spec.embed_dim or vocab
    rows = []
    for depth, n, count in depth_widths(spec, vocab):
        for seed in spec.seeds:
            cfg = CellConfig("rhn", m, n, depth, transform_bias_init=spec.transform_bias)
            model = build_model(cfg, vocab, spec.init, RngStream.derive(seed, depth),
                                tied=spec.train.weight_tying)
            tc = replace(spec.train, seed=seed)
            st = OptimState.for_model(model)
            rng = RngStream.derive(seed, 100 + depth)
            tr = make_batches(train_corpus, tc.batch_size, tc.seq_len)
            for epoch in range(spec.epochs):
                stats = train_epoch(model, tr, tc, st, rng, epoch)
                if log:
                    log(f"depth {depth} seed {seed} epoch {epoch} train bpc {stats.train_bpc:.4f}")
            va = make_batches(val_corpus, 1, tc.seq_len)
            ev = evaluate(model, va)
            rows.append({"depth": depth, "seed": seed, "hidden": n, "n_params": count,
                         "val_nll": ev["nll"], "val_bpc": ev["bpc"]})
    return rows


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_rows(path, header) -> list[dict]:
    """Strict reader: the header must match exactly."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(header):
            raise ContractError(f"{path}: expected header {header}, got {reader.fieldnames}")
        return list(reader)
