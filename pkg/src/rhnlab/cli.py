"""Command-line driver.

    rhnlab train       --config spec.cfg --out DIR
    rhnlab eval        --config spec.cfg --checkpoint DIR/best.ckpt
    rhnlab sweep       --config spec.cfg --out DIR --threads 4
    rhnlab depth-sweep --config spec.cfg --out DIR
    rhnlab gates       --config spec.cfg --checkpoint CKPT --out DIR
    rhnlab lesion      --config spec.cfg --checkpoint CKPT --out DIR
    rhnlab spectra     --config spec.cfg [--checkpoint CKPT] --out DIR
    rhnlab ckpt-inspect --checkpoint CKPT

Exit status: 0 success, 2 invalid input, 3 numeric fault during training.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import experiments as ex
from . import spectral
from .cells import NumericFault, RhnParams, RnnParams
from .config import KEY_HELP, ExperimentSpec, load_spec
from .data import (ChoraleSpec, _tokenize, corpus_from_tokens, load_piano_roll,
                   load_symbol_corpus, make_batches, roll_batches, split_sizes,
                   synthetic_chorales, synthetic_text)
from .model import build_model
from .numerics import ContractError, ConvergenceError, RngStream
from .train import OptimState, evaluate, train_epoch

SYNTHETIC_SEED = 20160712


# ---------------------------------------------------------------------------
# Data and model plumbing
# ---------------------------------------------------------------------------


class Dataset:
    """Splits plus what the model needs to know about them."""

    def __init__(self, kind, train, val, test, in_dim, out_dim, vocab=None):
        self.kind = kind  # "symbols" or "rolls"
        self.train, self.val, self.test = train, val, test
        self.in_dim, self.out_dim = in_dim, out_dim
        self.vocab = vocab

    def train_stream(self, spec, rng=None):
        if self.kind == "symbols":
            return make_batches(self.train, spec.batch_size, spec.seq_len)
        return roll_batches(self.train, spec.batch_size, rng)

    def eval_stream(self, split, spec):
        data = getattr(self, split)
        if self.kind == "symbols":
            return make_batches(data, 1, spec.seq_len)
        return roll_batches(data, spec.batch_size)


def load_dataset(spec: ExperimentSpec) -> Dataset:
    if not spec.data:
        raise ContractError("no data set: give a file, directory or synthetic-* name")
    if spec.data == "synthetic-chorales" or spec.data_level == "pianoroll":
        if spec.data == "synthetic-chorales":
            rolls = synthetic_chorales(spec.data_size, RngStream(SYNTHETIC_SEED), ChoraleSpec())
        else:
            files = sorted(Path(spec.data).glob("*.csv"))
            if not files:
                raise ContractError(f"no piano-roll CSV files in {spec.data}")
            rolls = [load_piano_roll(f) for f in files]
        a, b, _ = split_sizes(len(rolls), spec.split)
        D = rolls[0].n_pitches
        if any(r.n_pitches != D for r in rolls):
            raise ContractError("piano rolls disagree on the pitch dimension")
        return Dataset("rolls", rolls[:a], rolls[a:a + b], rolls[a + b:], D, D)
    if spec.data == "synthetic-text":
        raw = synthetic_text(spec.data_size, RngStream(SYNTHETIC_SEED))
        tr, va, te = corpus_from_tokens(_tokenize(raw, spec.data_level), spec.data_level, spec.split)
    else:
        tr, va, te = load_symbol_corpus(spec.data, spec.data_level, spec.split)
    V = len(tr.vocab)
    return Dataset("symbols", tr, va, te, spec.embed_dim or V, V, tr.vocab)


def make_model(spec: ExperimentSpec, ds: Dataset, rng: RngStream):
    cfg = spec.cell_config(ds.in_dim)
    return build_model(cfg, ds.out_dim, spec.init, rng, embed=ds.kind == "symbols",
                       tied=spec.weight_tying)


def _meta(spec):
    return {"run_id": spec.run_id, "seed": spec.seed}


def stats_header(depth: int) -> list[str]:
    return (["epoch", "lr", "train_nll", "val_nll", "val_bpc", "val_ppl", "grad_norm_mean"]
            + [f"gate_{i + 1}" for i in range(depth)])


def _fmt(v):
    return repr(float(v))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(spec: ExperimentSpec, out: Path) -> int:
    ds = load_dataset(spec)
    model = make_model(spec, ds, RngStream.derive(spec.seed, 0))
    tc = spec.train_config()
    st = OptimState.for_model(model)
    rng = RngStream.derive(spec.seed, 1)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.checkpoint_save(model, out / "best.ckpt", _meta(spec))
    best = float("inf")
    last = None
    status = 0
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(stats_header(model.config.depth))
        fh.flush()
        for epoch in range(tc.max_epochs):
            try:
                stats = train_epoch(model, ds.train_stream(tc, rng), tc, st, rng, epoch)
                ev = evaluate(model, ds.eval_stream("val", tc))
            except NumericFault as err:
                print(f"numeric fault in epoch {epoch}: {err}", file=sys.stderr)
                status = 3
                break
            gates = stats.gate_means or [float("nan")] * model.config.depth
            w.writerow([epoch, _fmt(stats.lr), _fmt(stats.train_nll), _fmt(ev["nll"]),
                        _fmt(ev["bpc"]), _fmt(ev["perplexity"]), _fmt(stats.grad_norm_mean)]
                       + [_fmt(g) for g in gates])
            fh.flush()
            last = ev
            if ev["nll"] < best:
                best = ev["nll"]
                ckpt.checkpoint_save(model, out / "best.ckpt", _meta(spec))
    ckpt.checkpoint_save(model, out / "final.ckpt", _meta(spec))
    if status:
        return status
    if last is None:
        last = evaluate(model, ds.eval_stream("val", tc))
    unit = "bpc" if ds.kind == "symbols" and spec.data_level == "character" else "perplexity"
    if ds.kind == "rolls":
        unit = "nll"
    print(f"val {unit} {last[unit]:.6f}")
    return status


def cmd_eval(spec: ExperimentSpec, path: Path, split: str = "val") -> int:
    ds = load_dataset(spec)
    model, _ = ckpt.checkpoint_load(path)
    ev = evaluate(model, ds.eval_stream(split, spec))
    for k in ("nll", "bpc", "perplexity"):
        print(f"{split} {k} {ev[k]:.6f}")
    return 0


def sweep_spec(spec: ExperimentSpec) -> ex.SweepSpec:
    return ex.SweepSpec(archs=spec.archs, depths=spec.depths, budgets=spec.budgets,
                        n_settings=spec.n_settings, seeds=spec.seeds,
                        max_epochs=spec.max_epochs, patience=spec.patience,
                        batch_size=spec.batch_size, momentum=spec.momentum,
                        clip_norm=spec.clip_norm, n_train=spec.data_size)


def cmd_sweep(spec: ExperimentSpec, out: Path, threads: int = 1) -> int:
    rows, _ = ex.run_sweep(sweep_spec(spec), threads)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_rows(out / "sweep.csv", ex.SWEEP_HEADER, rows)
    for arch in spec.archs:
        meds = " ".join(f"d{d}={ex.median_best(rows, arch, d):.4f}" for d in spec.depths)
        print(f"{arch} median best loss {meds}")
    return 0


def cmd_depth_sweep(spec: ExperimentSpec, out: Path) -> int:
    ds = load_dataset(spec)
    if ds.kind != "symbols":
        raise ContractError("depth-sweep runs on symbol corpora")
    dspec = ex.DepthSweepSpec(depths=spec.depths, budget=spec.budget, seeds=spec.seeds,
                              epochs=spec.max_epochs, train=spec.train_config(), init=spec.init,
                              transform_bias=spec.transform_bias_init,
                              embed_dim=spec.embed_dim or None)
    rows = ex.run_depth_sweep(dspec, ds.train, ds.val,
                              log=lambda s: print(s, file=sys.stderr))
    out.mkdir(parents=True, exist_ok=True)
    ex.write_rows(out / "depth_sweep.csv", ex.DEPTH_HEADER, rows)
    for r in rows:
        print(f"depth {r['depth']} seed {r['seed']} width {r['hidden']} "
              f"params {r['n_params']} val bpc {r['val_bpc']:.4f}")
    return 0


def _sequences(ds: Dataset, spec: ExperimentSpec, count: int):
    if ds.kind == "rolls":
        return [r.frames for r in (ds.val or ds.train)[:count]]
    data = ds.val.symbols if len(ds.val) >= spec.seq_len else ds.train.symbols
    return [data[i * spec.seq_len:(i + 1) * spec.seq_len] for i in range(count)
            if (i + 1) * spec.seq_len <= len(data)]


def cmd_gates(spec: ExperimentSpec, path: Path, out: Path, count: int = 4) -> int:
    model, _ = ckpt.checkpoint_load(path)
    if not isinstance(model.cell, RhnParams):
        raise ContractError("gates needs an RHN checkpoint")
    ds = load_dataset(spec)
    seqs = _sequences(ds, spec, count)
    T = min(len(s) for s in seqs)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "layer"] + [f"t{t}" for t in range(T)])
        for i, seq in enumerate(seqs):
            act = ex.gate_activity(model, seq[:T])
            for layer, row in enumerate(act, 1):
                w.writerow([i, layer] + [_fmt(v) for v in row])
    return 0


def cmd_lesion(spec: ExperimentSpec, path: Path, out: Path) -> int:
    model, _ = ckpt.checkpoint_load(path)
    ds = load_dataset(spec)
    rows = ex.lesion_table(model, ds.train_stream(spec), spec.lesion_bias)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_rows(out / "lesion.csv", ex.LESION_HEADER, rows)
    for r in rows:
        print(f"layer {r['layer']} loss {r['loss']:.6f} delta {r['delta']:+.6f}")
    return 0


def _jacobian(cell, y, x):
    if isinstance(cell, RnnParams):
        return spectral.rnn_jacobian(cell, y, x, literal=False)
    if isinstance(cell, RhnParams) and cell.config.depth == 1:
        return spectral.rhn_jacobian(cell, y, x, literal=False)
    return spectral.numerical_jacobian(cell, y, x)


def cmd_spectra(spec: ExperimentSpec, path: Path | None, out: Path) -> int:
    """Disc and eigenvalue tables of the temporal Jacobian at the zero state
    with zero input, for a checkpoint or a freshly initialised model."""
    if path is not None:
        model, _ = ckpt.checkpoint_load(path)
        cell = model.cell
    else:
        cfg = spec.cell_config(spec.embed_dim or spec.hidden_dim)
        model = build_model(cfg, cfg.input_dim, spec.init, RngStream.derive(spec.seed, 0),
                            embed=False)
        cell = model.cell
    n, m = cell.config.hidden_dim, cell.config.input_dim
    points = {"zero": (np.zeros(n), np.zeros(m))}
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for label, (y, x) in points.items():
        A = _jacobian(cell, y, x)
        spectral.write_discs_csv(out / f"discs_{label}.csv", spectral.gersgorin_discs(A))
        try:
            rep = spectral.spectrum_report(A)
        except ConvergenceError as err:
            failures += 1
            print(f"{label}: eigensolver failed: {err}", file=sys.stderr)
            continue
        spectral.write_eigen_csv(out / f"eigs_{label}.csv", rep.eigenvalues)
        print(f"{label}: spectral radius {rep.spectral_radius:.6g} norm {rep.norm:.6g} "
              f"containment gap {rep.containment_gap:.3g}")
    return 0 if failures == 0 else 1


def cmd_inspect(path: Path) -> int:
    for line in ckpt.describe(path):
        print(line)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:24s} {v}" for k, v in KEY_HELP.items())
    p = argparse.ArgumentParser(
        prog="rhnlab", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Recurrent Highway Network laboratory.",
        epilog="config keys (key = value, one per line):\n" + keys)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "sweep", "depth-sweep", "gates", "lesion", "spectra",
                 "ckpt-inspect"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--checkpoint", type=Path)
        if name == "eval":
            sp.add_argument("--split", choices=("train", "val", "test"), default="val")
        if name == "gates":
            sp.add_argument("--sequences", type=int, default=4)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.config) if args.config else ExperimentSpec()
        if args.seed is not None:
            spec = replace(spec, seed=args.seed, seeds=(args.seed,))
        out = args.out or Path(spec.out_dir)
        needs_ckpt = args.command in ("eval", "gates", "lesion", "ckpt-inspect")
        if needs_ckpt and args.checkpoint is None:
            raise ContractError(f"{args.command} needs --checkpoint")
        if args.threads < 1:
            raise ContractError("--threads must be >= 1")
        if args.command == "train":
            return cmd_train(spec, out)
        if args.command == "eval":
            return cmd_eval(spec, args.checkpoint, args.split)
        if args.command == "sweep":
            return cmd_sweep(spec, out, args.threads)
        if args.command == "depth-sweep":
            return cmd_depth_sweep(spec, out)
        if args.command == "gates":
            return cmd_gates(spec, args.checkpoint, out, args.sequences)
        if args.command == "lesion":
            return cmd_lesion(spec, args.checkpoint, out)
        if args.command == "spectra":
            return cmd_spectra(spec, args.checkpoint, out)
        return cmd_inspect(args.checkpoint)
    except (ContractError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
