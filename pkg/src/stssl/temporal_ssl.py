"""Region/city contrastive task across time steps."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

SCORE_FLOOR = 1e-12


def fuse_views(H, H_aug, w1, w2) -> Tensor:
    return dc.mul(w1, H) + dc.mul(w2, H_aug)


def city_summary(V) -> Tensor:
    """sigmoid of the region mean: [..., N, D] -> [..., D]."""
    return dc.sigmoid(dc.mean(dc._as_tensor(V), axis=-2))


def _bilinear(v, s, W3) -> Tensor:
    # v: [..., N, D], s: [..., D] -> [..., N]
    s = dc._as_tensor(s)
    vw = dc.matmul(dc._as_tensor(v), W3)
    return (vw * s.reshape(s.shape[:-1] + (1, s.shape[-1]))).sum(axis=-1)


def discriminate(v, s, W3) -> Tensor:
    """σ(vᵀ W3 s) for one region vector v [D] or a stack [..., N, D]."""
    v = dc._as_tensor(v)
    if v.ndim == 1:
        return dc.sigmoid(_bilinear(v.reshape(1, -1), s, W3)).reshape(())
    return dc.sigmoid(_bilinear(v, s, W3))


def temporal_loss(V_t, V_neg, s_t, W3) -> Tensor:
    """-Σ_n [log g(v_t, s_t) + log(1 - g(v_t', s_t))], batch-averaged.

    Scores are floored at 1e-12 before the log.
    """
    pos = _bilinear(V_t, s_t, W3)
    neg = _bilinear(V_neg, s_t, W3)
    floor = np.log(SCORE_FLOOR)
    # log(1 - σ(x)) == log σ(-x)
    ll = dc.clamp_min(dc.log_sigmoid(pos), floor) + dc.clamp_min(dc.log_sigmoid(-neg), floor)
    per_sample = -ll.sum(axis=-1)
    return per_sample.mean() if per_sample.ndim else per_sample


def shifted_negatives(V: Tensor) -> Tensor:
    """Pair sample i with sample i+1 (cyclic) along the batch axis."""
    return dc.roll(V, -1, axis=0)
