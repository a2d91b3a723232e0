"""Dense linear algebra, seeded randomness and a small eigensolver.

Vectors and matrices are plain float64 numpy arrays (matrices row-major).
Randomness comes from :class:`RngStream`, a xoshiro256** generator seeded
through splitmix64 so that draw sequences are identical on every platform.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ConvergenceError(ArithmeticError):
    """An iterative method did not converge; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ContractError(f"expected a non-empty vector, got shape {v.shape}")
    return v


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"expected a matrix, got shape {m.shape}")
    return m


def matvec(a, x) -> np.ndarray:
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ContractError(f"matvec: {a.shape} matrix with length-{x.shape[0]} vector")
    return a @ x


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class RngStream:
    """xoshiro256** stream whose 256-bit state is expanded from a seed by splitmix64.

    ``random`` maps the top 53 bits of each draw to [0, 1). Normal deviates use
    Box-Muller on consecutive uniform pairs, so one gaussian costs two draws
    (the sine branch is discarded to keep the stream position simple).
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        sm = self.seed & _MASK64
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    @classmethod
    def derive(cls, master_seed: int, index: int) -> "RngStream":
        """Private stream for worker ``index`` of a run seeded with ``master_seed``."""
        _, mixed = splitmix64((int(master_seed) * 0x100000001B3 + int(index)) & _MASK64)
        return cls(mixed)

    @property
    def state(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self._state)

    def next_u64(self, size: int = 1) -> np.ndarray:
        out = np.empty(int(size), dtype=np.uint64)
        _fill_u64(self._state, out)
        return out

    def random(self, size: int) -> np.ndarray:
        bits = self.next_u64(size) >> np.uint64(11)
        return bits.astype(np.float64) * _TWO_M53

    def standard_normal(self, size: int) -> np.ndarray:
        u = self.random(2 * int(size)).reshape(-1, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return radius * np.cos(2.0 * np.pi * u[:, 1])


def _size(shape) -> tuple[tuple[int, ...], int]:
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    return shape, int(np.prod(shape, dtype=np.int64))


def gaussian_sample(rng: RngStream, std: float, shape) -> np.ndarray:
    if not std >= 0:
        raise ContractError(f"std must be >= 0, got {std}")
    shape, size = _size(shape)
    if std == 0:
        return np.zeros(shape)
    return (std * rng.standard_normal(size)).reshape(shape)


def uniform_sample(rng: RngStream, lo: float, hi: float, shape) -> np.ndarray:
    if not lo <= hi:
        raise ContractError(f"uniform_sample needs lo <= hi, got [{lo}, {hi}]")
    shape, size = _size(shape)
    if lo == hi:
        return np.full(shape, float(lo))
    u = rng.random(size).reshape(shape)
    return np.minimum(lo + (hi - lo) * u, hi)


# ---------------------------------------------------------------------------
# Norms and spectra
# ---------------------------------------------------------------------------


def spectral_norm(a, tol: float = 1e-12, max_iter: int = 20000) -> float:
    """Largest singular value by power iteration on ``a.T @ a``.

    Stops once the eigen-residual of the symmetric Gram matrix is at most
    ``tol`` times the current Rayleigh quotient, which bounds the relative
    error of the returned value by ``tol``. Every 64 steps without
    convergence the iterated operator is squared (same dominant eigenvector,
    twice the convergence exponent), so clustered singular values such as
    those of near-identity Jacobians still converge in a few hundred steps.
    """
    a = as_matrix(a)
    if not tol > 0:
        raise ContractError("tol must be positive")
    if not np.all(np.isfinite(a)):
        raise ContractError("spectral_norm needs a finite matrix")
    if not np.any(a):
        return 0.0
    gram = a.T @ a
    op = gram
    v = RngStream(0x5EED).standard_normal(gram.shape[0]) + 1.0
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(max_iter):
        w = gram @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * lam:
            return math.sqrt(lam)
        if it % 64 == 63:
            op = op @ op
            op /= np.max(np.abs(op))
        if op is not gram:
            w = op @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector fell in the null space
            v = np.roll(v, 1) + 1.0 / gram.shape[0]
            v /= np.linalg.norm(v)
            continue
        v = w / norm
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations",
                           last=math.sqrt(max(lam, 0.0)))


def _hessenberg(a: np.ndarray) -> np.ndarray:
    """Householder reduction to upper Hessenberg form (similarity transform)."""
    h = a.copy()
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(alpha, x[0])
        v /= np.linalg.norm(v)
        h[k + 1:, k:] -= 2.0 * np.outer(v, v @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h


def eigenvalues_dense(a) -> np.ndarray:
    """All eigenvalues of a real square matrix, with multiplicity.

    Hessenberg reduction followed by Francis double-shift QR sweeps with
    exceptional shifts at 10 and 20 stalled iterations. A subdiagonal entry is
    deflated when it drops below machine epsilon times its two diagonal
    neighbours (times ``||A||_F`` when both neighbours are zero).
    At most ``100 * n`` sweeps are spent in total. Order is unspecified.
    """
    a = as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ContractError(f"eigenvalues_dense needs a square matrix, got {a.shape}")
    if n > 512:
        raise ContractError("eigenvalues_dense is limited to n <= 512")
    if not np.all(np.isfinite(a)):
        raise ContractError("eigenvalues_dense needs a finite matrix")
    h = _hessenberg(a)
    eps = np.finfo(np.float64).eps
    fro = np.linalg.norm(a)
    wr = np.zeros(n)
    wi = np.zeros(n)
    hi = n - 1
    sweeps = 0
    its = 0
    exshift = 0.0
    while hi >= 0:
        # locate a negligible subdiagonal entry
        lo = hi
        while lo > 0:
            s = abs(h[lo - 1, lo - 1]) + abs(h[lo, lo])
            if s == 0.0:
                s = fro
            if abs(h[lo, lo - 1]) <= eps * s:
                h[lo, lo - 1] = 0.0
                break
            lo -= 1
        x = h[hi, hi]
        if lo == hi:
            wr[hi] = x + exshift
            hi -= 1
            its = 0
            continue
        y = h[hi - 1, hi - 1]
        w = h[hi, hi - 1] * h[hi - 1, hi]
        if lo == hi - 1:
            p = 0.5 * (y - x)
            q = p * p + w
            z = math.sqrt(abs(q))
            x += exshift
            if q >= 0.0:
                z = p + math.copysign(z, p)
                wr[hi - 1] = wr[hi] = x + z
                if z != 0.0:
                    wr[hi] = x - w / z
            else:
                wr[hi - 1] = wr[hi] = x + p
                wi[hi - 1] = z
                wi[hi] = -z
            hi -= 2
            its = 0
            continue
        if sweeps >= 100 * n:
            raise ConvergenceError(f"QR iteration exceeded {100 * n} sweeps",
                                   last=wr + 1j * wi)
        if its in (10, 20):
            exshift += x
            h[np.arange(hi + 1), np.arange(hi + 1)] -= x
            s = abs(h[hi, hi - 1]) + abs(h[hi - 1, hi - 2])
            x = y = 0.75 * s
            w = -0.4375 * s * s
        its += 1
        sweeps += 1
        _francis_sweep(h, lo, hi, x, y, w, eps)
    return wr + 1j * wi


def _francis_sweep(h, lo, hi, x, y, w, eps):
    # pick the start row of the bulge: two consecutive small subdiagonals
    m = hi - 2
    while True:
        z = h[m, m]
        r = x - z
        s = y - z
        p = (r * s - w) / h[m + 1, m] + h[m, m + 1]
        q = h[m + 1, m + 1] - z - r - s
        r = h[m + 2, m + 1]
        s = abs(p) + abs(q) + abs(r)
        p, q, r = p / s, q / s, r / s
        if m == lo:
            break
        u = abs(h[m, m - 1]) * (abs(q) + abs(r))
        v = abs(p) * (abs(h[m - 1, m - 1]) + abs(z) + abs(h[m + 1, m + 1]))
        if u <= eps * v:
            break
        m -= 1
    for i in range(m + 2, hi + 1):
        h[i, i - 2] = 0.0
        if i != m + 2:
            h[i, i - 3] = 0.0
    n_cols = h.shape[0]
    for k in range(m, hi):
        if k != m:
            p = h[k, k - 1]
            q = h[k + 1, k - 1]
            r = h[k + 2, k - 1] if k != hi - 1 else 0.0
            x = abs(p) + abs(q) + abs(r)
            if x == 0.0:
                continue
            p, q, r = p / x, q / x, r / x
        s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
        if s == 0.0:
            continue
        if k == m:
            if lo != m:
                h[k, k - 1] = -h[k, k - 1]
        else:
            h[k, k - 1] = -s * x
        p += s
        x = p / s
        y = q / s
        z = r / s
        q /= p
        r /= p
        three = k != hi - 1
        # row transformation
        rows = h[k, k:n_cols]
        if three:
            pv = rows + q * h[k + 1, k:n_cols] + r * h[k + 2, k:n_cols]
            h[k + 2, k:n_cols] -= pv * z
        else:
            pv = rows + q * h[k + 1, k:n_cols]
        h[k + 1, k:n_cols] -= pv * y
        h[k, k:n_cols] -= pv * x
        # column transformation
        top = min(hi, k + 3) + 1
        if three:
            pv = x * h[:top, k] + y * h[:top, k + 1] + z * h[:top, k + 2]
            h[:top, k + 2] -= pv * r
        else:
            pv = x * h[:top, k] + y * h[:top, k + 1]
        h[:top, k + 1] -= pv * q
        h[:top, k] -= pv
