"""Per-step losses (in nats) and the perplexity / bits-per-character metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, logsumexp

from .numerics import ContractError


def softmax_xent(logits, target: int) -> float:
    """``-log softmax(logits)[target]`` for a single prediction."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < z.shape[-1]:
        raise ContractError(f"target {target} outside vocabulary of size {z.shape[-1]}")
    if not np.isfinite(z).all():
        raise ContractError("softmax_xent needs finite logits")
    zmax = z.max()
    return float(zmax + math.log(np.exp(z - zmax).sum()) - z[target])


def bernoulli_nll(logits, targets) -> float:
    """Summed negative log-likelihood of independent binary targets under
    logistic outputs, in the ``softplus(z) - y z`` form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ContractError(f"logits {z.shape} and targets {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("bernoulli_nll targets must be 0 or 1")
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


def xent_batch(logits, targets, weights=None):
    """Summed cross-entropy over a batch and its gradient w.r.t. the logits.

    ``logits`` has shape ``(B, V)``, ``targets`` integer shape ``(B,)``.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"target outside vocabulary of size {V}")
    lse = logsumexp(logits, axis=-1)
    rows = np.arange(logits.shape[0])
    per = lse - logits[rows, targets]
    grad = np.exp(logits - lse[:, None])
    grad[rows, targets] -= 1.0
    if weights is not None:
        per = per * weights
        grad *= weights[:, None]
    return per.sum(), grad


def bernoulli_batch(logits, targets, weights=None):
    """Summed Bernoulli NLL over a ``(B, D)`` batch and its logit gradient."""
    per = np.logaddexp(0.0, logits) - targets * logits
    grad = expit(logits) - targets
    if weights is not None:
        per = per * weights[:, None]
        grad *= weights[:, None]
    return per.sum(), grad


def metrics(mean_nll_nats: float) -> dict[str, float]:
    if mean_nll_nats < 0:
        raise ContractError("mean NLL must be non-negative")
    return {
        "nll": float(mean_nll_nats),
        "perplexity": math.exp(mean_nll_nats) if mean_nll_nats < 709.0 else math.inf,
        "bpc": mean_nll_nats / math.log(2.0),
    }
