"""Shared builders for the test modules."""

import numpy as np

from rhnlab.cells import CellConfig
from rhnlab.data import Batch
from rhnlab.model import build_model
from rhnlab.numerics import RngStream


def grad_check_configs():
    """(family, n, depth, coupled, T) for every gradient-exactness case."""
    out = []
    for n in (2, 5):
        for T in (1, 3, 7):
            out.append(("rnn", n, 1, True, T))
            for depth in (1, 2, 5):
                out.append(("rhn", n, depth, True, T))
                out.append(("rhn", n, depth, False, T))
                out.append(("dt", n, depth, True, T))
                out.append(("dts", n, depth, True, T))
    return out


def small_model(family, n, depth, coupled, loss_kind, seed, vocab=4, m=3, scale=0.6):
    """Randomly initialised model with non-zero biases everywhere."""
    rng = RngStream(seed)
    symbols = loss_kind == "xent"
    cfg = CellConfig(family, m if symbols else vocab, n, depth, coupled_gates=coupled)
    model = build_model(cfg, vocab, f"gaussian:{scale}", rng, embed=symbols)
    for name, arr in model.arrays().items():
        if ".b" in name or name.endswith("P_b"):
            arr[...] = rng.standard_normal(arr.size).reshape(arr.shape) * scale
    return model


def random_batch(loss_kind, T, B, vocab, seed):
    rng = RngStream(seed)
    if loss_kind == "xent":
        x = (rng.random(T * B) * vocab).astype(np.int64).reshape(T, B)
        y = (rng.random(T * B) * vocab).astype(np.int64).reshape(T, B)
    else:
        x = (rng.random(T * B * vocab) < 0.5).astype(float).reshape(T, B, vocab)
        y = (rng.random(T * B * vocab) < 0.5).astype(float).reshape(T, B, vocab)
    return Batch(x, y)


def variational_trial(seed):
    """Draw a random dropout configuration, run one masked window and check
    that every site sees the same mask at every time step, bit for bit."""
    from rhnlab.grad import bptt_window
    from rhnlab.train import TrainConfig, mask_shapes, sample_variational_masks

    rng = RngStream.derive(4242, seed)
    u = rng.random(8)
    family = ("rhn", "dt", "dts", "rnn")[int(u[0] * 4)]
    depth = 1 if family == "rnn" else 1 + int(u[1] * 4)
    B, T, n, m, V = 1 + int(u[2] * 4), 2 + int(u[3] * 8), 3, 2, 5
    probs = [0.0 if p < 0.2 else 0.8 * p for p in rng.random(4)]
    cfg = TrainConfig(dropout_embed=probs[0], dropout_input=probs[1],
                      dropout_hidden=probs[2], dropout_output=probs[3],
                      per_layer_hidden_masks=bool(u[4] < 0.5))
    model = build_model(CellConfig(family, m, n, depth), V, "gaussian:0.5", rng)
    masks = sample_variational_masks(cfg, mask_shapes(model, cfg, B), rng)
    x = (rng.random(T * B) * V).astype(np.int64).reshape(T, B)
    res, _ = bptt_window(model, Batch(x, x), masks=masks)
    rows = np.arange(B)
    first = res.caches[0].masks
    for t, cache in enumerate(res.caches):
        for a, b in zip(cache.masks, first):
            assert np.array_equal(a, b)
        want_x = model.heads.E[x[t]] * masks.embed[rows, x[t]][:, None] * masks.input
        assert np.array_equal(cache.x, want_x)
        assert np.array_equal(res.outputs[t], cache.y * masks.output)
        for layer, used in enumerate(cache.masks):
            want = masks.hidden[layer] if cfg.per_layer_hidden_masks else masks.hidden
            assert np.array_equal(used, want)
    for mask, p in zip((masks.embed, masks.input, masks.hidden, masks.output), probs):
        allowed = {1.0} if p == 0 else {0.0, 1.0 / (1.0 - p)}
        assert set(np.unique(mask).tolist()) <= allowed
    return True
