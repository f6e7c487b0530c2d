"""Soft region clustering with balanced entropic assignments."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

log = logging.getLogger(__name__)


def cluster_scores(H, prototypes):
    """Dot-product scores H·Cᵀ, [..., N, D] x [K, D] -> [..., N, K]."""
    if isinstance(H, Tensor) or isinstance(prototypes, Tensor):
        return dc.matmul(H, dc.swapaxes(dc._as_tensor(prototypes), 0, 1))
    return H @ prototypes.T


@dataclass
class SinkhornResult:
    assignment: np.ndarray
    converged: bool
    iterations: int
    residuals: list = field(default_factory=list)


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def sinkhorn_project(logits: np.ndarray, epsilon: float = 0.05, max_iters: int = 100,
                     tol: float = 1e-3) -> SinkhornResult:
    """Balanced assignment maximizing <Z, logits> + ε·entropy(Z).

    Rows of Z sum to 1 and columns to N/K.  Alternates column and row
    rescaling of exp(logits/ε) in the log domain, finishing on a row step so
    row sums are exact; the residual is the L1 column-marginal violation.
    An iterate that misses ``tol`` within ``max_iters`` is repaired by
    ``round_to_feasible`` and flagged ``converged=False``.
    Accepts [N, K] or a batch [B, N, K]; a batch converges jointly.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    N, K = logits.shape[-2:]
    log_col = np.log(N / K)
    log_z = logits / epsilon
    log_z = log_z - _logsumexp(log_z, axis=-1)
    residuals = []
    converged = False
    it = 0
    while True:
        col = np.exp(_logsumexp(log_z, axis=-2))
        res = float(np.abs(col - N / K).sum(axis=(-2, -1)).max())
        residuals.append(res)
        if res < tol:
            converged = True
            break
        if it >= max_iters:
            break
        it += 1
        log_z = log_z - _logsumexp(log_z, axis=-2) + log_col
        log_z = log_z - _logsumexp(log_z, axis=-1)
    z = np.exp(log_z)
    if not converged:
        log.debug("sinkhorn stopped after %d iterations, residual %.3g", it, residuals[-1])
        z = round_to_feasible(z)
    return SinkhornResult(z, converged, it, residuals)


def round_to_feasible(z: np.ndarray) -> np.ndarray:
    """Nearest-cost repair onto {rows sum 1, columns sum N/K}.

    Shrinks overfull rows, then overfull columns, and hands the remaining
    deficit out as a rank-one nonnegative correction.  The L1 change is at
    most twice the marginal violation of the input.
    """
    N, K = z.shape[-2:]
    row_t, col_t = 1.0, N / K
    z = z * np.minimum(row_t / z.sum(axis=-1, keepdims=True), 1.0)
    z = z * np.minimum(col_t / z.sum(axis=-2, keepdims=True), 1.0)
    err_r = np.maximum(row_t - z.sum(axis=-1), 0.0)
    err_c = np.maximum(col_t - z.sum(axis=-2), 0.0)
    mass = err_c.sum(axis=-1)[..., None, None]
    fix = err_r[..., :, None] * err_c[..., None, :]
    return z + np.divide(fix, mass, out=np.zeros_like(fix), where=mass > 0)


def spatial_loss(logits_original: Tensor, assignment: np.ndarray, gamma: float) -> Tensor:
    """Σ_n cross-entropy(assignment_n, softmax(logits_n / γ)).

    With a leading batch axis the per-sample sums are averaged.  The
    assignment is a constant target.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    logp = dc.log_softmax(dc._as_tensor(logits_original) * (1.0 / gamma), axis=-1)
    per_sample = -(logp * np.asarray(assignment)).sum(axis=(-2, -1))
    return per_sample.mean() if per_sample.ndim else per_sample


def cluster_purity(clusters: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of regions whose cluster's majority label matches their own."""
    total = 0
    for c in np.unique(clusters):
        members = labels[clusters == c]
        total += np.bincount(members).max()
    return total / labels.size


def write_assignments_csv(path, assignment: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        K = assignment.shape[1]
        w.writerow(["region", "cluster"] + [f"z{k}" for k in range(K)])
        for n, row in enumerate(assignment):
            w.writerow([n, int(row.argmax())] + [repr(float(v)) for v in row])
