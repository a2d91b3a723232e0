"""Temporal Jacobians, Gershgorin discs and spectral reports.

Jacobians here follow the gradient-transport layout used in the analysis of
recurrent nets: ``A[j, i] = d y_i / d y_prev_j``, i.e. the transpose of the
usual numerator-layout Jacobian. For a plain RNN this is
``R.T @ diag(f'(R y_prev))``. Spectra are unaffected by the transpose; disc
radii are taken over rows of ``A`` as laid out here.

``literal=True`` evaluates the gates and nonlinearities with input and bias
terms dropped (the simplified form of the analysis). ``literal=False`` keeps
``W x + b`` and matches the true step function, so it can be checked against
finite differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .cells import RhnParams, RnnParams, activation_derivative, step
from .numerics import (ContractError, RngStream, as_matrix, eigenvalues_dense,
                       gaussian_sample, spectral_norm)

GAMMA = {"tanh": 1.0, "logistic": 0.25}

DISC_HEADER = ["row_index", "center_re", "radius"]
EIGEN_HEADER = ["re", "im"]


@dataclass(frozen=True)
class GersgorinDisc:
    center: complex
    radius: float
    row_index: int

    def distance(self, z: complex) -> float:
        """Distance from ``z`` to the disc (0 inside)."""
        return max(0.0, abs(z - self.center) - self.radius)


@dataclass
class SpectrumReport:
    matrix: np.ndarray
    discs: list
    eigenvalues: np.ndarray
    spectral_radius: float
    norm: float
    sigma_max: float
    gamma: float | None = None
    bound_gamma_sigma: float | None = None
    containment_gap: float = 0.0
    notes: dict = field(default_factory=dict)

    @property
    def vanishing(self) -> bool:
        """True when the norm bound guarantees shrinking gradients."""
        return self.bound_gamma_sigma is not None and self.bound_gamma_sigma < 1.0


def gersgorin_discs(a) -> list[GersgorinDisc]:
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ContractError("Gershgorin discs need a square matrix")
    absrow = np.abs(a).sum(axis=1) - np.abs(np.diag(a))
    return [GersgorinDisc(complex(a[i, i]), float(max(absrow[i], 0.0)), i)
            for i in range(a.shape[0])]


def union_distance(z: complex, discs) -> float:
    """Distance from ``z`` to the union of the discs."""
    return min(d.distance(z) for d in discs)


def containment_gap(eigenvalues, discs) -> float:
    """Largest distance of any eigenvalue from the disc union (0 when all inside)."""
    return max((union_distance(complex(z), discs) for z in eigenvalues), default=0.0)


def spectrum_report(a, gamma=None, sigma_max=None) -> SpectrumReport:
    """Discs, eigenvalues, spectral radius and 2-norm of ``a``.

    Without an explicit ``sigma_max`` the matrix's own spectral norm is used.
    """
    a = as_matrix(a)
    discs = gersgorin_discs(a)
    eig = eigenvalues_dense(a)
    norm = spectral_norm(a)
    sig = norm if sigma_max is None else sigma_max
    return SpectrumReport(
        matrix=a, discs=discs, eigenvalues=eig,
        spectral_radius=float(np.max(np.abs(eig))) if eig.size else 0.0,
        norm=norm, sigma_max=sig, gamma=gamma,
        bound_gamma_sigma=None if gamma is None else gamma * sig,
        containment_gap=containment_gap(eig, discs),
    )


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------


def rnn_jacobian(p: RnnParams, y_prev, x=None, literal=True) -> np.ndarray:
    y_prev = np.asarray(y_prev, dtype=np.float64)
    if y_prev.shape != (p.hidden_dim,):
        raise ContractError(f"y_prev must have shape ({p.hidden_dim},)")
    pre = p.R @ y_prev
    if not literal:
        pre = pre + p.b
        if x is not None:
            pre = pre + p.W @ np.asarray(x, dtype=np.float64)
    fprime = activation_derivative(p.activation, a=pre)
    return p.R.T * fprime[None, :]


def product_jacobian(jacobians, t1: int, t2: int) -> np.ndarray:
    """Transport matrix from step ``t1`` to ``t2``: the factors for
    ``t1 < t <= t2`` multiplied in time order (``jacobians[t]`` maps the state
    at ``t-1`` to ``t``). An empty range gives the identity."""
    if t1 > t2:
        raise ContractError("product_jacobian needs t1 <= t2")
    factors = [as_matrix(jacobians[t]) for t in range(t1 + 1, t2 + 1)]
    if not factors:
        n = as_matrix(jacobians[0]).shape[0] if len(jacobians) else 0
        if n == 0:
            raise ContractError("cannot size an identity without any Jacobian")
        return np.eye(n)
    out = factors[0]
    for f in factors[1:]:
        if f.shape != out.shape:
            raise ContractError(f"Jacobian shapes {out.shape} and {f.shape} disagree")
        out = out @ f
    return out


@dataclass
class RhnJacobianParts:
    """Ingredients of the depth-1 RHN Jacobian (gradient-transport layout)."""

    A: np.ndarray
    H_prime: np.ndarray
    T_prime: np.ndarray
    C_prime: np.ndarray
    h: np.ndarray
    t: np.ndarray
    c: np.ndarray


def rhn_jacobian_parts(p: RhnParams, y_prev, x=None, literal=True) -> RhnJacobianParts:
    cfg = p.config
    if cfg.depth != 1:
        raise ContractError("closed-form RHN Jacobian is defined for recurrence depth 1 only; "
                            "use numerical_jacobian for deeper transitions")
    y = np.asarray(y_prev, dtype=np.float64)
    if y.shape != (cfg.hidden_dim,):
        raise ContractError(f"y_prev must have shape ({cfg.hidden_dim},)")
    a_h = p.R_H[0] @ y
    a_t = p.R_T[0] @ y
    a_c = None if cfg.coupled_gates else p.R_C[0] @ y
    if not literal:
        a_h = a_h + p.b_H[0]
        a_t = a_t + p.b_T[0]
        if a_c is not None:
            a_c = a_c + p.b_C[0]
        if x is not None:
            x = np.asarray(x, dtype=np.float64)
            a_h = a_h + p.W_H @ x
            a_t = a_t + p.W_T @ x
            if a_c is not None:
                a_c = a_c + p.W_C @ x
    h = np.tanh(a_h)
    t = expit(a_t)
    H = p.R_H[0].T * (1.0 - h * h)[None, :]
    Tp = p.R_T[0].T * (t * (1.0 - t))[None, :]
    if cfg.coupled_gates:
        c = 1.0 - t
        C = -Tp
    else:
        c = expit(a_c)
        C = p.R_C[0].T * (c * (1.0 - c))[None, :]
    A = np.diag(c) + H * t[None, :] + C * y[None, :] + Tp * h[None, :]
    return RhnJacobianParts(A=A, H_prime=H, T_prime=Tp, C_prime=C, h=h, t=t, c=c)


def rhn_jacobian(p: RhnParams, y_prev, x=None, literal=True) -> np.ndarray:
    """``diag(c) + H' diag(t) + C' diag(y_prev) + T' diag(h)`` for depth 1."""
    return rhn_jacobian_parts(p, y_prev, x, literal).A


def numerical_jacobian(p, y_prev, x=None, eps=1e-6) -> np.ndarray:
    """Central-difference Jacobian of one full step (any family and depth),
    returned in the same transport layout as the analytic forms."""
    y = np.asarray(y_prev, dtype=np.float64)
    n = y.shape[0]
    if x is None:
        x = np.zeros(p.config.input_dim)
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        up, _ = step(p, x, y + e)
        down, _ = step(p, x, y - e)
        J[j] = (up - down) / (2.0 * eps)
    return J


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def norm_bound_report(p: RnnParams, y_prev) -> SpectrumReport:
    """Spectrum of the literal RNN Jacobian together with the bound
    ``||A|| <= gamma * sigma_max(R^T)``, gamma being the activation's
    derivative bound (1 for tanh, 1/4 for the logistic)."""
    if p.activation not in GAMMA:
        raise ContractError(f"no derivative bound known for {p.activation!r}")
    A = rnn_jacobian(p, y_prev)
    return spectrum_report(A, gamma=GAMMA[p.activation], sigma_max=spectral_norm(p.R.T))


def init_regime_demo(n: int, scheme: str, std: float, rng: RngStream) -> SpectrumReport:
    """Report for the Jacobian of a freshly initialised tanh RNN at zero state.

    At ``y_prev = 0`` the Jacobian equals ``R.T``: ``small-gaussian`` draws
    ``R ~ N(0, std^2)``; ``identity-plus-noise`` uses ``I`` plus that noise
    off the diagonal.
    """
    if scheme not in ("small-gaussian", "identity-plus-noise"):
        raise ContractError(f"unknown initialisation regime {scheme!r}")
    R = gaussian_sample(rng, std, (n, n))
    if scheme == "identity-plus-noise":
        np.fill_diagonal(R, 1.0)
    p = RnnParams(W=np.zeros((n, 1)), R=R, b=np.zeros(n))
    report = norm_bound_report(p, np.zeros(n))
    report.notes["mean_radius"] = float(np.mean([d.radius for d in report.discs]))
    return report


def write_discs_csv(path, discs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DISC_HEADER)
        for d in discs:
            w.writerow([d.row_index, repr(d.center.real), repr(d.radius)])


def write_eigen_csv(path, eigenvalues):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EIGEN_HEADER)
        for z in eigenvalues:
            w.writerow([repr(float(z.real)), repr(float(z.imag))])


def read_discs_csv(path) -> list[GersgorinDisc]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != DISC_HEADER:
        raise ContractError(f"{path}: bad disc header {rows[:1]}")
    return [GersgorinDisc(complex(float(c)), float(r), int(i)) for i, c, r in rows[1:]]


def read_eigen_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != EIGEN_HEADER:
        raise ContractError(f"{path}: bad eigenvalue header {rows[:1]}")
    return np.array([complex(float(r), float(i)) for r, i in rows[1:]])


def sorted_spectrum(eigs) -> np.ndarray:
    """Deterministic ordering (real part, then imaginary) for multiset comparison."""
    eigs = np.asarray(eigs, dtype=complex)
    return eigs[np.lexsort((np.round(eigs.imag, 9), np.round(eigs.real, 9)))]


def multiset_distance(a, b) -> float:
    """Max distance under the best one-to-one matching of two spectra."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape:
        raise ContractError("spectra differ in size")
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max()) if a.size else 0.0
