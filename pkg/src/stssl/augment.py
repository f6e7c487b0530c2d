"""Heterogeneity-guided augmentation of a traffic flow graph.

All functions work on plain arrays: the draws are constants for the
backward pass.  Leading batch dimensions are allowed where noted.
"""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

MAX_PROB = 0.5


def capped_allocation(weights: np.ndarray, total: float, cap: float = MAX_PROB) -> np.ndarray:
    """Probabilities proportional to ``weights`` summing to ``total``, each <= cap.

    Mass that would exceed the cap is handed to the uncapped entries.  When
    the budget cannot be met (total > cap * #positive) every positive weight
    gets the cap.  Works over the last axis; leading axes are independent.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim > 1:
        flat = w.reshape(-1, w.shape[-1])
        tot = np.broadcast_to(np.asarray(total, dtype=np.float64), w.shape[:-1]).reshape(-1)
        return np.stack([capped_allocation(row, t, cap) for row, t in zip(flat, tot)]
                        ).reshape(w.shape)
    out = np.zeros_like(w)
    positive = w > 0
    if total <= 0 or not positive.any():
        return out
    if total >= cap * positive.sum():
        out[positive] = cap
        return out
    capped = np.zeros_like(positive)
    while True:
        free = positive & ~capped
        scale = (total - cap * capped.sum()) / w[free].sum()
        over = free & (scale * w > cap)
        if not over.any():
            break
        capped |= over
    out[free] = scale * w[free]
    out[capped] = cap
    return out


def region_relevance(first_tc: np.ndarray, w0: np.ndarray) -> np.ndarray:
    """Softmax over time of b·w0.  [..., T1, N, D] -> [..., T1, N]."""
    scores = first_tc @ w0
    scores = scores - scores.max(axis=-2, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-2, keepdims=True)


def region_summary(first_tc: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    """Relevance-weighted sum over time.  -> [..., N, D]."""
    return np.einsum("...tn,...tnd->...nd", relevance, first_tc)


def heterogeneity(summary: np.ndarray) -> np.ndarray:
    """Cosine similarity between region summaries.  [..., N, D] -> [..., N, N].

    A zero-norm region gets similarity 0 against every region, itself included.
    """
    norms = np.linalg.norm(summary, axis=-1)
    degenerate = norms == 0
    if degenerate.any():
        log.warning("%d region summaries have zero norm", int(degenerate.sum()))
    unit = summary / np.where(degenerate, 1.0, norms)[..., None]
    q = unit @ np.swapaxes(unit, -1, -2)
    return np.clip(q, -1.0, 1.0)


# ------------------------------------------------------------ traffic level

def mask_probabilities(relevance: np.ndarray, T: int, ratio: float) -> np.ndarray:
    """Per-(step, region) mask probabilities for a T-step input window.

    relevance: [..., T1, N] covering the newest T1 steps; older steps take the
    region's mean relevance.  Returns [..., T, N].
    """
    T1 = relevance.shape[-2]
    lead = T - T1
    if lead < 0:
        raise ValueError(f"relevance covers {T1} steps but window has {T}")
    if lead:
        fill = np.repeat(relevance.mean(axis=-2, keepdims=True), lead, axis=-2)
        rel = np.concatenate([fill, relevance], axis=-2)
    else:
        rel = relevance
    lo = rel.min(axis=-2, keepdims=True)
    span = rel.max(axis=-2, keepdims=True) - lo
    scaled = np.where(span > 0, (rel - lo) / np.where(span > 0, span, 1.0), 0.0)
    inv = 1.0 - scaled
    # each region has an entry at 1, so the weights never all vanish
    flat = inv.reshape(inv.shape[:-2] + (-1,))
    prob = capped_allocation(flat, ratio * flat.shape[-1])
    return prob.reshape(inv.shape)


def traffic_mask(x: np.ndarray, relevance: np.ndarray | None, ratio: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero out whole (step, region) entries of x [..., T, N, C].

    ``relevance=None`` masks uniformly at random with probability ``ratio``.
    Returns the masked copy and the boolean mask [..., T, N].
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if ratio == 0:
        return x.copy(), np.zeros(x.shape[:-1], dtype=bool)
    if relevance is None:
        prob = np.full(x.shape[:-1], ratio)
    else:
        prob = mask_probabilities(relevance, x.shape[-3], ratio)
    mask = rng.random(x.shape[:-1]) < prob
    return np.where(mask[..., None], 0.0, x), mask


# ----------------------------------------------------------- topology level

def rewire_probabilities(adj: np.ndarray, q: np.ndarray | None, ratio: float):
    """Removal and addition probabilities over the upper triangle.

    Returns (edges, p_remove, pairs, p_add) where ``edges``/``pairs`` are
    (rows, cols) index arrays of existing edges and non-adjacent pairs.
    ``q=None`` gives the uniform (non-adaptive) scheme with the same budget.
    """
    n = adj.shape[0]
    iu = np.triu_indices(n, k=1)
    present = adj[iu] > 0
    edges = (iu[0][present], iu[1][present])
    pairs = (iu[0][~present], iu[1][~present])
    n_edges = edges[0].size

    budget = ratio * n_edges
    if q is None:
        dissim, sim = np.ones(n_edges), np.ones(pairs[0].size)
    else:
        qp = (q + 1.0) / 2.0
        dissim, sim = 1.0 - qp[edges], qp[pairs]
    return edges, capped_allocation(dissim, budget), pairs, capped_allocation(sim, budget)


def topology_rewire(adj: np.ndarray, q: np.ndarray | None, ratio: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Drop dissimilar edges and add similar long-range ones; returns a new Ã."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    out = adj.copy()
    if ratio == 0:
        return out
    edges, p_remove, pairs, p_add = rewire_probabilities(adj, q, ratio)
    drop = rng.random(p_remove.size) < p_remove
    grow = rng.random(p_add.size) < p_add
    r, c = edges[0][drop], edges[1][drop]
    out[r, c] = out[c, r] = 0.0
    r, c = pairs[0][grow], pairs[1][grow]
    out[r, c] = out[c, r] = 1.0
    return out
