"""Spatio-temporal encoder: gated causal TC layers around graph convolutions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class ArchitectureError(ValueError):
    pass


@dataclass
class EncoderConfig:
    D: int = 64
    kernel_size: int = 3
    num_blocks: int = 1
    in_channels: int = 2

    @property
    def num_tc_layers(self) -> int:
        # TC-SC-TC per block plus the closing TC
        return 2 * self.num_blocks + 1

    def required_input_length(self) -> int:
        return self.num_tc_layers * (self.kernel_size - 1) + 1

    def validate(self, T: int) -> None:
        if self.D < 1 or self.kernel_size < 1 or self.num_blocks < 1:
            raise ArchitectureError("D, kernel_size and num_blocks must be positive")
        if T - self.num_tc_layers * (self.kernel_size - 1) != 1:
            raise ArchitectureError(
                f"input length {T} does not collapse to 1 through {self.num_tc_layers} "
                f"TC layers of kernel {self.kernel_size}; need T={self.required_input_length()}")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    D, k = cfg.D, cfg.kernel_size
    p = {
        "input.weight": _uniform(rng, (cfg.in_channels, D), cfg.in_channels),
        "input.bias": np.zeros(D),
    }
    tc = 0
    for b in range(cfg.num_blocks):
        for name in (f"tc{tc}", None, f"tc{tc + 1}"):
            if name is None:
                p[f"sc{b}.weight"] = _uniform(rng, (D, D), D)
                p[f"sc{b}.bias"] = np.zeros(D)
                continue
            p[f"{name}.kernel_p"] = _uniform(rng, (k, D, D), k * D)
            p[f"{name}.kernel_q"] = _uniform(rng, (k, D, D), k * D)
            p[f"{name}.bias_p"] = np.zeros(D)
            p[f"{name}.bias_q"] = np.zeros(D)
        tc += 2
    p[f"tc{tc}.kernel_p"] = _uniform(rng, (k, D, D), k * D)
    p[f"tc{tc}.kernel_q"] = _uniform(rng, (k, D, D), k * D)
    p[f"tc{tc}.bias_p"] = np.zeros(D)
    p[f"tc{tc}.bias_q"] = np.zeros(D)
    p["mlp.hidden.weight"] = _uniform(rng, (D, D), D)
    p["mlp.hidden.bias"] = np.zeros(D)
    p["mlp.out.weight"] = _uniform(rng, (D, 2), D)
    p["mlp.out.bias"] = np.zeros(2)
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in p.items()}


def gated_causal_conv(x: Tensor, kernel_p: Tensor, kernel_q: Tensor,
                      bias_p: Tensor, bias_q: Tensor) -> Tensor:
    """[..., T, N, C_in] -> [..., T-k+1, N, C_out] as P ⊙ sigmoid(Q)."""
    p = dc.temporal_conv(x, kernel_p) + bias_p
    q = dc.temporal_conv(x, kernel_q) + bias_q
    return p * dc.sigmoid(q)


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric normalization with self-loops; works on [N, N] or [B, N, N]."""
    adj = np.asarray(adj, dtype=np.float64)
    a_hat = adj + np.eye(adj.shape[-1])
    d = a_hat.sum(axis=-1) ** -0.5
    return d[..., :, None] * a_hat * d[..., None, :]


def graph_conv(b: Tensor, a_norm, weight: Tensor, bias: Tensor) -> Tensor:
    """ReLU(Â·B·W + b) at each time slice.

    b: [..., T, N, D].  a_norm: [N, N] or per-sample [B, N, N].
    """
    a_norm = np.asarray(a_norm)
    if a_norm.ndim == 3 and b.ndim == 4:
        a_norm = a_norm[:, None]
    if b.shape[-2] != a_norm.shape[-1] or b.shape[-1] != weight.shape[0]:
        raise dc.ContractError(
            f"graph_conv shape mismatch: B {b.shape}, Â {a_norm.shape}, W {weight.shape}")
    return dc.relu(dc.matmul(dc.Tensor(a_norm), b @ weight) + bias)


def _tc(x, params, i):
    return gated_causal_conv(x, params[f"tc{i}.kernel_p"], params[f"tc{i}.kernel_q"],
                             params[f"tc{i}.bias_p"], params[f"tc{i}.bias_q"])


def st_encode(x, a_norm, params: dict[str, Tensor], cfg: EncoderConfig):
    """Encode a flow window into region embeddings.

    x: [..., T, N, 2] (array or Tensor); returns (first TC output [..., T1, N, D],
    H [..., N, D]).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    cfg.validate(x.shape[-3])
    h = x @ params["input.weight"] + params["input.bias"]
    first = None
    tc = 0
    for b in range(cfg.num_blocks):
        h = _tc(h, params, tc)
        if first is None:
            first = h
        h = graph_conv(h, a_norm, params[f"sc{b}.weight"], params[f"sc{b}.bias"])
        h = _tc(h, params, tc + 1)
        tc += 2
    h = _tc(h, params, tc)
    H = h.reshape(h.shape[:-3] + h.shape[-2:])
    return first, H


def mlp_predict(H: Tensor, params: dict[str, Tensor]) -> Tensor:
    hidden = dc.relu(H @ params["mlp.hidden.weight"] + params["mlp.hidden.bias"])
    return hidden @ params["mlp.out.weight"] + params["mlp.out.bias"]
