import math

import numpy as np
import pytest

from rhnlab.cells import CellConfig, InitScheme, RnnParams, init_params, rhn_step, rnn_step
from rhnlab.numerics import ContractError, RngStream, eigenvalues_dense, spectral_norm
from rhnlab.spectral import (GAMMA, containment_gap, gersgorin_discs, init_regime_demo,
                             multiset_distance, norm_bound_report, numerical_jacobian,
                             product_jacobian, read_discs_csv, read_eigen_csv, rhn_jacobian,
                             rhn_jacobian_parts, rnn_jacobian, sorted_spectrum,
                             spectrum_report, write_discs_csv, write_eigen_csv)


def random_rhn(n, m=3, coupled=True, b_t=None, scale=0.5, seed=0):
    cfg = CellConfig("rhn", m, n, 1, coupled_gates=coupled)
    p = init_params(cfg, InitScheme("gaussian", scale), RngStream(seed))
    rng = RngStream(seed + 1000)
    for name, arr in p.arrays().items():
        if name.startswith("b"):
            arr[...] = rng.standard_normal(arr.size).reshape(arr.shape) * scale
    if b_t is not None:
        p.b_T[...] = b_t
    return p


def random_rnn(n, activation="tanh", scale=0.7, seed=0):
    rng = RngStream(seed)
    return RnnParams(rng.standard_normal(2 * n).reshape(n, 2) * scale,
                     rng.standard_normal(n * n).reshape(n, n) * scale,
                     rng.standard_normal(n) * scale, activation)


def test_rnn_jacobian_examples():
    p = RnnParams(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3))
    assert not np.any(rnn_jacobian(p, np.ones(3)))
    p = RnnParams(np.zeros((1, 1)), np.ones((1, 1)), np.zeros(1))
    assert rnn_jacobian(p, np.zeros(1)).tolist() == [[1.0]]
    with pytest.raises(ContractError):
        rnn_jacobian(p, np.zeros(2))


def test_rnn_jacobian_matches_fd():
    p = random_rnn(4, seed=3)
    x, y = np.array([0.3, -0.2]), np.array([0.1, -0.5, 0.4, 0.2])
    A = rnn_jacobian(p, y, x, literal=False)
    assert np.max(np.abs(A - numerical_jacobian(p, y, x))) < 1e-6


def test_jacobian_layout_is_transport():
    # A[j, i] = d y_i / d y_prev_j, so a row vector times A moves forward
    p = random_rnn(3, seed=4)
    y = np.array([0.2, 0.1, -0.3])
    A = rnn_jacobian(p, y, literal=False)
    dv = np.array([1e-7, -2e-7, 0.5e-7])
    base, _ = rnn_step(p, np.zeros(2), y)
    moved, _ = rnn_step(p, np.zeros(2), y + dv)
    assert np.allclose(moved - base, dv @ A, atol=1e-12)


def test_product_jacobian_examples():
    a = np.array([[0.5, 0.1], [0.2, 0.3]])
    assert np.array_equal(product_jacobian([np.eye(2), a], 0, 1), a)
    out = product_jacobian([0.9 * np.eye(3)] * 11, 0, 10)
    assert np.allclose(out, 0.9 ** 10 * np.eye(3), rtol=1e-14)
    assert 0.9 ** 10 == pytest.approx(0.3487, abs=1e-4)
    assert np.array_equal(product_jacobian([np.eye(2)] * 5, 0, 4), np.eye(2))
    assert np.array_equal(product_jacobian([a, a], 1, 1), np.eye(2))
    with pytest.raises(ContractError):
        product_jacobian([np.eye(2), np.eye(2), np.eye(3)], 0, 2)
    with pytest.raises(ContractError):
        product_jacobian([a, a], 1, 0)


def test_product_jacobian_is_time_ordered():
    rng = RngStream(2)
    js = [rng.standard_normal(9).reshape(3, 3) for _ in range(4)]
    assert np.allclose(product_jacobian(js, 0, 3), js[1] @ js[2] @ js[3])


def test_rhn_jacobian_saturated_carry_is_identity():
    p = random_rhn(6, b_t=-40.0, seed=5)
    y = np.clip(RngStream(6).standard_normal(6), -1, 1)
    A = rhn_jacobian(p, y, np.ones(3), literal=False)
    assert np.max(np.abs(A - np.eye(6))) <= 1e-12
    for d in gersgorin_discs(A):
        assert abs(d.center - 1) <= 1e-12 and d.radius <= 1e-12
    assert np.max(np.abs(eigenvalues_dense(A) - 1)) <= 1e-9


def test_rhn_jacobian_open_transform_matches_candidate():
    p = random_rhn(6, b_t=40.0, seed=7)
    y = np.clip(RngStream(8).standard_normal(6), -1, 1)
    parts = rhn_jacobian_parts(p, y, np.ones(3), literal=False)
    got = sorted_spectrum(eigenvalues_dense(parts.A))
    want = sorted_spectrum(eigenvalues_dense(parts.H_prime))
    assert np.max(np.abs(got - want)) <= 1e-6


@pytest.mark.parametrize("coupled", [True, False])
def test_rhn_jacobian_matches_fd(coupled):
    for seed in range(10):
        n = 2 + seed % 7
        p = random_rhn(n, coupled=coupled, seed=seed)
        rng = RngStream(seed + 50)
        y = np.clip(rng.standard_normal(n), -1, 1)
        x = rng.standard_normal(3)
        A = rhn_jacobian(p, y, x, literal=False)
        assert np.max(np.abs(A - numerical_jacobian(p, y, x))) < 1e-6


def test_rhn_literal_form_ignores_inputs_and_biases():
    p = random_rhn(4, seed=2)
    y = np.array([0.1, -0.2, 0.3, 0.4])
    a = rhn_jacobian(p, y)
    p.b_H[...] += 3.0
    assert np.array_equal(rhn_jacobian(p, y, x=np.ones(3)), a)
    assert not np.allclose(rhn_jacobian(p, y, np.ones(3), literal=False), a)


def test_rhn_jacobian_rejects_depth_above_one():
    cfg = CellConfig("rhn", 2, 3, 2)
    p = init_params(cfg, InitScheme("gaussian", 0.1), RngStream(0))
    with pytest.raises(ContractError):
        rhn_jacobian(p, np.zeros(3))
    # deeper transitions still have a numerical Jacobian
    assert numerical_jacobian(p, np.zeros(3)).shape == (3, 3)


def test_coupled_equals_mirrored_independent():
    for seed in range(10):
        p = random_rhn(5, coupled=True, seed=seed)
        cfg = CellConfig("rhn", 3, 5, 1, coupled_gates=False)
        q = init_params(cfg, InitScheme("gaussian", 0.0), RngStream(0))
        for k in ("W_H", "W_T", "R_H", "R_T", "b_H", "b_T"):
            getattr(q, k)[...] = getattr(p, k)
        # c = sigma(-a_T) = 1 - t parameter-wise
        q.W_C[...], q.R_C[...], q.b_C[...] = -p.W_T, -p.R_T, -p.b_T
        y = np.clip(RngStream(seed + 7).standard_normal(5), -1, 1)
        x = RngStream(seed + 8).standard_normal(3)
        for literal in (True, False):
            a = rhn_jacobian(p, y, x, literal=literal)
            b = rhn_jacobian(q, y, x, literal=literal)
            assert np.max(np.abs(a - b)) <= 1e-12
        assert np.allclose(rhn_step(p, x, y)[0], rhn_step(q, x, y)[0], atol=1e-15)


def test_gersgorin_examples():
    discs = gersgorin_discs(np.eye(2))
    assert [(d.center, d.radius) for d in discs] == [(1, 0), (1, 0)]
    discs = gersgorin_discs([[0.5, 0.2], [-0.1, 0.3]])
    assert discs[0].center == 0.5 and discs[0].radius == pytest.approx(0.2)
    assert discs[1].center == 0.3 and discs[1].radius == pytest.approx(0.1)
    a = np.array([[0.0, 1.0], [-2.0, 0.0]])
    eig = eigenvalues_dense(a)
    assert multiset_distance(eig, [1j * math.sqrt(2), -1j * math.sqrt(2)]) < 1e-12
    assert containment_gap(eig, gersgorin_discs(a)) == 0.0
    with pytest.raises(ContractError):
        gersgorin_discs(np.ones((2, 3)))


def test_gersgorin_containment_random():
    rng = RngStream(31)
    for k in range(200):
        n = 1 + k % 16
        scale = 10.0 ** (rng.random(1)[0] * 6 - 3)
        a = rng.standard_normal(n * n).reshape(n, n) * scale
        assert containment_gap(eigenvalues_dense(a), gersgorin_discs(a)) <= 1e-9 * max(1, scale)


@pytest.mark.parametrize("activation", ["tanh", "logistic"])
def test_norm_bound(activation):
    for seed in range(30):
        p = random_rnn(1 + seed % 8, activation, scale=1.5, seed=seed)
        y = np.clip(RngStream(seed).standard_normal(p.hidden_dim), -1, 1)
        rep = norm_bound_report(p, y)
        assert rep.gamma == GAMMA[activation]
        assert rep.norm <= rep.bound_gamma_sigma * (1 + 1e-10)
        assert rep.spectral_radius <= rep.norm * (1 + 1e-10)


def test_norm_bound_zero_recurrence():
    p = RnnParams(np.zeros((3, 1)), np.zeros((3, 3)), np.zeros(3))
    rep = norm_bound_report(p, np.zeros(3))
    assert rep.sigma_max == 0.0 and rep.bound_gamma_sigma == 0.0 and rep.vanishing
    assert GAMMA == {"tanh": 1.0, "logistic": 0.25}


def test_init_regime_demo():
    rep = init_regime_demo(5, "small-gaussian", 0.0, RngStream(0))
    assert all(d.center == 0 and d.radius == 0 for d in rep.discs)
    rep = init_regime_demo(5, "identity-plus-noise", 0.0, RngStream(0))
    assert all(d.center == 1 and d.radius == 0 for d in rep.discs)
    rep = init_regime_demo(32, "identity-plus-noise", 0.01, RngStream(1))
    assert all(abs(d.center - 1) <= 0.05 for d in rep.discs)
    assert 0.0 < rep.notes["mean_radius"] < 1.0
    rep = init_regime_demo(32, "small-gaussian", 0.01, RngStream(1))
    assert all(abs(d.center) <= 0.05 for d in rep.discs)
    with pytest.raises(ContractError):
        init_regime_demo(4, "orthogonal", 0.1, RngStream(0))


def test_spectrum_report_radius_below_norm():
    rng = RngStream(12)
    for _ in range(50):
        a = rng.standard_normal(36).reshape(6, 6)
        rep = spectrum_report(a)
        assert rep.spectral_radius <= rep.norm * (1 + 1e-10)
        assert rep.norm == pytest.approx(spectral_norm(a), rel=1e-12)


def test_csv_round_trip(tmp_path):
    a = RngStream(3).standard_normal(25).reshape(5, 5)
    rep = spectrum_report(a)
    write_discs_csv(tmp_path / "d.csv", rep.discs)
    write_eigen_csv(tmp_path / "e.csv", rep.eigenvalues)
    assert read_discs_csv(tmp_path / "d.csv") == rep.discs
    assert np.array_equal(read_eigen_csv(tmp_path / "e.csv"), rep.eigenvalues)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "row_index,center_re,radius"
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "re,im"
