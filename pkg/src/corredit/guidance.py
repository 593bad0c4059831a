"""Classifier-free guidance with correspondence-guided fusion (Corr-CFG).

Only the non-anchor image's unconditional prediction is fused with the
anchor's; the raw unconditional prediction still appears inside the
guidance difference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corrfield import CorrField, gather_source
from .errors import ConfigError, ShapeError

BRANCH_MODES = ("uncond", "both")


@dataclass(frozen=True)
class CfgConfig:
    scale: float = 7.5
    lam: float = 0.8
    gamma: float = 0.9
    branch_mode: str = "uncond"
    rng_seed: int = 0
    # Fix one injection subset per trajectory instead of resampling per step.
    fixed_subset: bool = False
    # Debug: inject from the same cell instead of the corresponding one.
    same_position: bool = False

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigError("guidance scale must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigError(f"branch_mode must be one of {BRANCH_MODES}")


@dataclass
class EpsPair:
    cond: np.ndarray
    uncond: np.ndarray

    def __post_init__(self):
        if self.cond.shape != self.uncond.shape:
            raise ShapeError("conditional and unconditional predictions differ in shape")


def predict_branches(denoiser: Callable, z_t: np.ndarray, t: int, condition,
                     null_condition=None) -> EpsPair:
    return EpsPair(denoiser(z_t, t, condition), denoiser(z_t, t, null_condition))


def injection_mask(corr: CorrField, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(gamma) subset of the valid cells."""
    draw = rng.random(corr.shape)
    return corr.valid & (draw < gamma)


def inj(eps_i_u: np.ndarray, eps_j_u: np.ndarray, corr: CorrField, gamma: float,
        rng: np.random.Generator | None = None, mask: np.ndarray | None = None,
        same_position: bool = False) -> np.ndarray:
    """Replace a random ``gamma`` portion of valid target cells by the
    source prediction at the corresponding cell."""
    if eps_j_u.shape[:2] != corr.shape:
        raise ShapeError(f"latent grid {eps_j_u.shape[:2]} != corr grid {corr.shape}")
    if mask is None:
        mask = injection_mask(corr, gamma, rng)
    if same_position:
        src = eps_i_u
    else:
        src = gather_source(eps_i_u, eps_j_u, corr)
    out = eps_j_u.copy()
    out[mask] = src[mask]
    return out


def fuse_uncond(eps_i_u: np.ndarray, eps_j_u: np.ndarray, corr: CorrField, cfg: CfgConfig,
                rng: np.random.Generator | None = None, mask: np.ndarray | None = None) -> np.ndarray:
    injected = inj(eps_i_u, eps_j_u, corr, cfg.gamma, rng, mask, cfg.same_position)
    return (1.0 - cfg.lam) * eps_j_u + cfg.lam * injected


def guided_eps(fused_uncond: np.ndarray, pair: EpsPair, s: float) -> np.ndarray:
    if fused_uncond.shape != pair.cond.shape:
        raise ShapeError("fused prediction shape differs from the branch predictions")
    return fused_uncond + s * (pair.cond - pair.uncond)


def guided_eps_both(fused_uncond: np.ndarray, fused_cond: np.ndarray, s: float) -> np.ndarray:
    """Ablation: both branches fused before guidance."""
    if fused_uncond.shape != fused_cond.shape:
        raise ShapeError("fused predictions differ in shape")
    return fused_uncond + s * (fused_cond - fused_uncond)


def step_rng(seed: int, image_index: int, step: int) -> np.random.Generator:
    """Independent stream per (seed, image, step)."""
    return np.random.default_rng([seed, image_index, step])
