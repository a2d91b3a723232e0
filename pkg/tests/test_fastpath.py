import numpy as np
import pytest

from rhnlab import fastpath, train
from rhnlab.cells import NumericFault
from rhnlab.data import Batch, roll_batches, synthetic_chorales
from rhnlab.grad import bptt_window
from rhnlab.numerics import RngStream
from rhnlab.train import OptimState, TrainConfig, train_epoch

from _support import random_batch, small_model


def close(a, b, rtol=1e-12):
    return np.max(np.abs(a - b)) <= rtol * max(np.max(np.abs(b)), 1e-300)


@pytest.mark.parametrize("family,depth", [("rhn", 1), ("rhn", 3), ("dt", 1), ("dt", 3),
                                          ("dts", 3)])
def test_window_matches_reference(family, depth):
    model = small_model(family, 5, depth, True, "bernoulli", seed=depth)
    base = random_batch("bernoulli", 7, 3, 4, seed=11)
    weights = np.ones((7, 3))
    weights[4:, 2] = 0.0
    y0 = RngStream(5).standard_normal(15).reshape(3, 5) * 0.5
    for batch in (base, Batch(base.inputs, base.targets, weights)):
        res, g = bptt_window(model, batch, y0=y0)
        loss, count, gf, gates = fastpath.window(model, batch, y0)
        assert loss == pytest.approx(res.loss, rel=1e-13)
        assert count == res.count
        assert set(gf) == set(g)
        assert all(close(gf[k], g[k]) for k in g)
        if family == "rhn":
            want = [sum(float(np.mean(c.t[layer])) for c in res.caches) for layer in range(depth)]
            assert np.allclose(gates, want, rtol=1e-13)
        else:
            assert gates is None


def test_eligibility():
    rhn = small_model("rhn", 4, 2, True, "bernoulli", seed=0)
    assert fastpath.eligible(rhn, None)
    assert not fastpath.eligible(rhn, masks=object())
    assert not fastpath.eligible(small_model("rhn", 4, 2, False, "bernoulli", seed=0), None)
    assert not fastpath.eligible(small_model("rhn", 4, 2, True, "xent", seed=0), None)
    assert not fastpath.eligible(small_model("rnn", 4, 1, True, "bernoulli", seed=0), None)
    assert not fastpath.eligible(rhn.copy(np.longdouble), None)


def test_non_finite_raises():
    model = small_model("dt", 4, 2, True, "bernoulli", seed=0)
    model.cell.R[1, 0, 0] = np.nan
    with pytest.raises(NumericFault):
        fastpath.window(model, random_batch("bernoulli", 3, 2, 4, seed=0))


@pytest.mark.parametrize("family", ["rhn", "dt"])
def test_epochs_agree_with_reference_path(family, monkeypatch):
    rolls = synthetic_chorales(12, RngStream(8))
    cfg = TrainConfig(lr=0.05, momentum=0.9, clip_norm=0.0, batch_size=4)
    D = rolls[0].frames.shape[1]
    runs = []
    for fast in (True, False):
        monkeypatch.setattr(train, "FAST_KERNELS", fast)
        model = small_model(family, 6, 3, True, "bernoulli", seed=4, vocab=D, m=D, scale=0.3)
        st = OptimState.for_model(model)
        stats = [train_epoch(model, roll_batches(rolls, 4, RngStream(e)), cfg, st, RngStream(1))
                 for e in range(3)]
        runs.append((stats, model.arrays()))
    (sf, af), (sr, ar) = runs
    for a, b in zip(sf, sr):
        assert a.train_nll == pytest.approx(b.train_nll, rel=1e-12)
        assert np.allclose(a.gate_means, b.gate_means, rtol=1e-12)
    assert all(close(af[k], ar[k], 1e-10) for k in ar)
