"""Self-attention with correspondence-guided query warping (Corr-Attention).

Token grids are arrays of shape ``(h, w, d)``. Projections act on row
vectors: ``Q = x @ f_Q``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corrfield import CorrField, gather_source
from .errors import ConfigError, ShapeError

WARP_TARGETS = ("queries", "outputs")


@dataclass(frozen=True)
class GateConfig:
    """When correspondence guidance is active.

    Steps and layers are 1-based: step 1 is the first (noisiest) denoising
    step and layer 1 the first attention layer in forward order. Both step
    bounds are inclusive.
    """

    step_lo: int = 4
    step_hi: int = 40
    layer_threshold: int = 8
    warp_target: str = "queries"
    enabled: bool = True

    def __post_init__(self):
        if self.step_lo > self.step_hi:
            raise ConfigError(f"gate step range {self.step_lo}:{self.step_hi} is empty")
        if self.layer_threshold < 0:
            raise ConfigError("layer_threshold must be >= 0")
        if self.warp_target not in WARP_TARGETS:
            raise ConfigError(f"warp_target must be one of {WARP_TARGETS}")


def gate(layer_idx: int, step_idx: int, cfg: GateConfig) -> bool:
    return (cfg.enabled and cfg.step_lo <= step_idx <= cfg.step_hi
            and layer_idx >= cfg.layer_threshold)


@dataclass
class AttnParams:
    f_q: np.ndarray
    f_k: np.ndarray
    f_v: np.ndarray
    f_out: np.ndarray

    def __post_init__(self):
        d = self.f_q.shape[0]
        for m in (self.f_q, self.f_k, self.f_v, self.f_out):
            if m.shape != (d, d) or not np.all(np.isfinite(m)):
                raise ShapeError("attention projections must be finite, square and equal-sized")

    @property
    def dim(self) -> int:
        return self.f_q.shape[0]

    @classmethod
    def identity(cls, d: int) -> "AttnParams":
        eye = np.eye(d)
        return cls(eye, eye.copy(), eye.copy(), eye.copy())


def project_qkv(x: np.ndarray, params: AttnParams):
    if x.ndim != 3 or x.shape[2] != params.dim:
        raise ShapeError(f"tokens {x.shape} do not match projection dim {params.dim}")
    return x @ params.f_q, x @ params.f_k, x @ params.f_v


def attention_weights(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Row-stochastic ``softmax(Q K^T / sqrt(d))`` over flattened tokens."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    d = Q.shape[-1]
    q = Q.reshape(-1, d)
    k = K.reshape(-1, d)
    logits = q @ k.T / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def corr_attention(Q_edit: np.ndarray, K_i: np.ndarray, V_i: np.ndarray) -> np.ndarray:
    """Attend from (warped) target queries to the source's keys and values."""
    if K_i.shape[:-1] != V_i.shape[:-1]:
        raise ShapeError("keys and values must cover the same tokens")
    w = attention_weights(Q_edit, K_i)
    out = w @ V_i.reshape(-1, V_i.shape[-1])
    return out.reshape(Q_edit.shape[:-1] + (V_i.shape[-1],))


def standard_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    return corr_attention(Q, K, V)


def warp_queries(Q_i: np.ndarray, Q_j: np.ndarray, corr: CorrField) -> np.ndarray:
    """Target queries with valid cells replaced by the matched source query."""
    return gather_source(Q_i, Q_j, corr)


def warp_outputs(F_i: np.ndarray, F_j: np.ndarray, corr: CorrField) -> np.ndarray:
    """Ablation: warp attention outputs instead of queries."""
    return gather_source(F_i, F_j, corr)


def guided_attention(q_j, k_j, v_j, q_i, k_i, v_i, corr: CorrField, warp_target: str):
    """Attention output for the target image of a guided pair."""
    if warp_target == "queries":
        return corr_attention(warp_queries(q_i, q_j, corr), k_i, v_i)
    if warp_target == "outputs":
        return warp_outputs(standard_attention(q_i, k_i, v_i),
                            standard_attention(q_j, k_j, v_j), corr)
    raise ConfigError(f"unknown warp_target {warp_target!r}")
