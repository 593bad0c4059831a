"""End-to-end consistent editing of image pairs and groups.

The anchor image denoises with ordinary classifier-free guidance. Every
other image advances in lockstep with it and, inside the gated steps and
layers, borrows the anchor's attention features (Corr-Attention) and a
correspondence-warped share of its unconditional noise prediction
(Corr-CFG). Groups use a star topology around the anchor.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attn import GateConfig
from .cache import CorrCache, CorrCacheEntry, MemoryCache, cache_key
from .config import EditConfig
from .corrfield import CorrField, downsample_corr, extract_correspondence, gather_source
from .denoise import (
    NULL_CONDITION, AnalyticScoreModel, analytic_eps, decode_latent, encode_image, init_params,
    toy_eps,
)
from .errors import DegradedCorrespondenceError, MetricError, ParameterError, ShapeError
from .guidance import EpsPair, fuse_uncond, guided_eps, guided_eps_both, injection_mask, step_rng
from .imageio import check_image
from .schedule import (
    NoiseSchedule, add_noise, ddim_step, make_schedule, step_pairs, timestep_subsequence,
)

log = logging.getLogger(__name__)


# --- denoiser backends -----------------------------------------------------


class ToyBackend:
    def __init__(self, params, schedule: NoiseSchedule):
        self.params = params
        self.schedule = schedule
        self.token_shape = params.arch.token_shape

    def single(self, x, t, condition):
        return toy_eps(x, t, condition, self.params, self.schedule)

    def paired(self, x_anchor, x_target, t, condition, corr_tok, gate_cfg, step_idx):
        return toy_eps((x_anchor, x_target), t, condition, self.params, self.schedule,
                       corr=corr_tok, gate_cfg=gate_cfg, step_idx=step_idx)


class AnalyticBackend:
    """Closed-form mixture over flattened latents; has no attention layers."""

    def __init__(self, model: AnalyticScoreModel, schedule: NoiseSchedule, token_shape):
        self.model = model
        self.schedule = schedule
        self.token_shape = token_shape

    def single(self, x, t, condition):
        cond = None if condition == NULL_CONDITION else condition
        return analytic_eps(x, t, cond, self.model, self.schedule)

    def paired(self, x_anchor, x_target, t, condition, corr_tok, gate_cfg, step_idx):
        return self.single(x_anchor, t, condition), self.single(x_target, t, condition)


def default_analytic_model(latent_shape, vocab: int = 8) -> AnalyticScoreModel:
    """One flat-latent Gaussian per label; the null condition mixes them all."""
    dim = int(np.prod(latent_shape))
    labels = list(range(1, vocab))
    means = [np.full(dim, (k / vocab - 0.5)) for k in labels]
    return AnalyticScoreModel(np.full(len(labels), 1.0 / len(labels)), means,
                              np.full(len(labels), 0.25),
                              {str(k): [i] for i, k in enumerate(labels)})


def make_backend(config: EditConfig):
    schedule = make_schedule(config.num_train_steps, config.beta_start, config.beta_end)
    if config.denoiser == "toy":
        from .denoise import ToyArch
        arch = ToyArch(latent_h=config.latent_size, latent_w=config.latent_size,
                       num_train_steps=config.num_train_steps)
        return ToyBackend(init_params(config.denoiser_seed, arch), schedule)
    shape = (config.latent_size, config.latent_size, 4)
    return AnalyticBackend(default_analytic_model(shape), schedule, shape[:2])


# --- building blocks -------------------------------------------------------


def apply_mask_blend(x_t: np.ndarray, known_x0: np.ndarray, mask: np.ndarray, t: int,
                     schedule: NoiseSchedule, z_fixed: np.ndarray) -> np.ndarray:
    """Keep editable cells (mask 1) and re-noise the known content elsewhere."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[..., None]
    if np.any(mask < 0) or np.any(mask > 1) or not np.all(np.isfinite(mask)):
        raise ParameterError("mask weights must lie in [0, 1]")
    if known_x0.shape != x_t.shape or mask.shape[:2] != x_t.shape[:2]:
        raise ShapeError("mask, known latent and x_t disagree in shape")
    return mask * x_t + (1.0 - mask) * add_noise(known_x0, z_fixed, t, schedule)


def mask_to_latent(mask: np.ndarray, latent_hw: tuple[int, int]) -> np.ndarray:
    """Average an image-resolution mask (1 = editable) down to latent cells."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m.mean(axis=2)
    lh, lw = latent_hw
    h, w = m.shape
    if h % lh or w % lw:
        raise ShapeError(f"mask {h}x{w} does not tile into {lh}x{lw}")
    return m.reshape(lh, h // lh, lw, w // lw).mean(axis=(1, 3))


def initial_noise(config: EditConfig, image_index: int, shape) -> np.ndarray:
    key = [config.seed] if config.noise_mode != "independent" else [config.seed, image_index]
    return np.random.default_rng(key).standard_normal(shape)


@dataclass
class ConsistencyReport:
    score: float
    per_point: list[float]
    count: int

    def to_dict(self) -> dict:
        return {"schema": "consistency@1", "score": self.score, "count": self.count,
                "per_point": self.per_point}


def consistency_score(edited_i: np.ndarray, edited_j: np.ndarray, corr: CorrField,
                      patch_radius: int = 3, sample_count: int = 256, seed: int = 0,
                      min_valid: int = 16) -> ConsistencyReport:
    """Mean normalized patch correlation at corresponding points.

    ``corr`` maps cells of ``edited_j`` to coordinates in ``edited_i``.
    Each channel of a patch is mean-centred separately so a colour cast
    alone cannot produce agreement; two flat patches count as identical, a
    flat patch against a textured one as uncorrelated.
    """
    if edited_j.shape[:2] != corr.shape or edited_i.shape[:2] != corr.src_shape:
        raise ShapeError("edited images do not match the correspondence grid")
    n_valid = int(corr.valid.sum())
    if n_valid < max(min_valid, 1):
        raise MetricError(f"only {n_valid} valid correspondences (< {min_valid})")
    rng = np.random.default_rng(seed)
    ys, xs = np.nonzero(corr.valid)
    pick = rng.choice(n_valid, size=min(sample_count, n_valid), replace=False)
    r = patch_radius
    pad_i = np.pad(edited_i, ((r, r), (r, r), (0, 0)), mode="reflect")
    pad_j = np.pad(edited_j, ((r, r), (r, r), (0, 0)), mode="reflect")
    sy, sx = corr.rounded_source()
    values = []
    for k in pick:
        y, x = ys[k], xs[k]
        a = pad_j[y:y + 2 * r + 1, x:x + 2 * r + 1]
        b = pad_i[sy[y, x]:sy[y, x] + 2 * r + 1, sx[y, x]:sx[y, x] + 2 * r + 1]
        a = (a - a.mean(axis=(0, 1))).ravel()
        b = (b - b.mean(axis=(0, 1))).ravel()
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-9 and nb < 1e-9:
            values.append(1.0)
        elif na < 1e-9 or nb < 1e-9:
            values.append(0.0)
        else:
            values.append(float(a @ b / (na * nb)))
    return ConsistencyReport(float(np.mean(values)), values, len(values))


# --- samplers --------------------------------------------------------------


@dataclass
class _MaskState:
    mask: np.ndarray
    known: np.ndarray
    z_fixed: np.ndarray


def _blend(x, state: _MaskState | None, t_prev, schedule):
    if state is None:
        return x
    return apply_mask_blend(x, state.known, state.mask, t_prev, schedule, state.z_fixed)


def sample_single(backend, z_T: np.ndarray, config: EditConfig,
                  mask_state: _MaskState | None = None) -> np.ndarray:
    """Baseline DDIM with standard classifier-free guidance."""
    schedule = backend.schedule
    x = z_T
    for t, t_prev in step_pairs(timestep_subsequence(schedule, config.num_steps)):
        pair = EpsPair(backend.single(x, t, config.condition), backend.single(x, t, NULL_CONDITION))
        eps = guided_eps(pair.uncond, pair, config.cfg.scale)
        x = _blend(ddim_step(x, eps, t, t_prev, schedule), mask_state, t_prev, schedule)
    return x


def sample_pair(backend, z_anchor: np.ndarray, z_target: np.ndarray, corr_lat: CorrField,
                corr_tok: CorrField, config: EditConfig, target_index: int = 1,
                masks: tuple = (None, None)) -> tuple[np.ndarray, np.ndarray]:
    """Joint DDIM for (anchor, target); returns both final latents."""
    schedule = backend.schedule
    cfg = config.cfg
    gate_cfg = config.gate
    s = cfg.scale
    xa, xb = z_anchor, z_target
    fixed = injection_mask(corr_lat, cfg.gamma, step_rng(cfg.rng_seed, target_index, 0))
    for k, (t, t_prev) in enumerate(step_pairs(timestep_subsequence(schedule, config.num_steps)), 1):
        ea_c, eb_c = backend.paired(xa, xb, t, config.condition, corr_tok, gate_cfg, k)
        ea_u, eb_u = backend.paired(xa, xb, t, NULL_CONDITION, corr_tok, gate_cfg, k)
        eps_a = guided_eps(ea_u, EpsPair(ea_c, ea_u), s)
        if cfg.lam > 0 and gate_cfg.step_lo <= k <= gate_cfg.step_hi:
            inj_mask = fixed if cfg.fixed_subset else injection_mask(
                corr_lat, cfg.gamma, step_rng(cfg.rng_seed, target_index, k))
            fused_u = fuse_uncond(ea_u, eb_u, corr_lat, cfg, mask=inj_mask)
            if cfg.branch_mode == "both":
                fused_c = fuse_uncond(ea_c, eb_c, corr_lat, cfg, mask=inj_mask)
                eps_b = guided_eps_both(fused_u, fused_c, s)
            else:
                eps_b = guided_eps(fused_u, EpsPair(eb_c, eb_u), s)
        else:
            eps_b = guided_eps(eb_u, EpsPair(eb_c, eb_u), s)
        xa = _blend(ddim_step(xa, eps_a, t, t_prev, schedule), masks[0], t_prev, schedule)
        xb = _blend(ddim_step(xb, eps_b, t, t_prev, schedule), masks[1], t_prev, schedule)
    return xa, xb


# --- correspondence acquisition ---------------------------------------------


@dataclass
class CorrLookup:
    forward: CorrField  # target -> anchor
    backward: CorrField
    key: str
    cache_hit: bool


def get_correspondence(anchor: np.ndarray, target: np.ndarray, cache=None,
                       corr_source: str = "cache", repair: bool = False) -> CorrLookup:
    """Cache-first correspondence for an ordered (anchor, target) pair.

    With ``repair`` a corrupt entry is recomputed instead of raising.
    """
    key = cache_key([anchor, target])
    if cache is not None and corr_source == "cache":
        try:
            entry = cache.get(key)
        except Exception:
            if not repair:
                raise
            log.warning("recomputing corrupt cache entry %s", key)
            cache.discard(key)
            entry = None
        if entry is not None:
            return CorrLookup(entry.forward, entry.backward, key, True)
    fwd, bwd = extract_correspondence(anchor, target)
    if cache is not None:
        cache.put(CorrCacheEntry(key, fwd, bwd))
    return CorrLookup(fwd, bwd, key, False)


# --- public entry points ---------------------------------------------------


@dataclass
class EditResult:
    images: list
    reports: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    latents: list = field(default_factory=list)
    cache_keys: dict = field(default_factory=dict)
    cache_hits: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def report(self) -> ConsistencyReport | None:
        return next(iter(self.reports.values()), None)


def _latent_factor(image: np.ndarray, config: EditConfig) -> int:
    h, w = image.shape[:2]
    if h != w or h % config.latent_size:
        raise ShapeError(f"images must be square multiples of {config.latent_size}, got {h}x{w}")
    return h // config.latent_size


def edit_group(images: list, config: EditConfig | None = None, *, cache=None,
               corrs: dict | None = None, masks: list | None = None,
               partial: bool = False, backend=None, repair: bool = False) -> EditResult:
    """Edit N >= 2 images consistently around ``images[anchor_index]``.

    ``corrs`` may supply ready-made image-resolution fields keyed by target
    index (target -> anchor), bypassing extraction. With ``partial`` a pair
    whose correspondence is degraded is reported in ``errors`` and its image
    left as ``None``; otherwise the error propagates.
    """
    config = config or EditConfig()
    images = [check_image(im) for im in images]
    n = len(images)
    if n < 2:
        raise ParameterError("edit_group needs at least two images")
    a = config.anchor_index
    if a >= n:
        raise ParameterError(f"anchor_index {a} out of range for {n} images")
    if cache is None and config.cache_dir:
        cache = CorrCache(config.cache_dir)
    backend = backend or make_backend(config)
    lat_hw = (config.latent_size, config.latent_size)
    factors = [_latent_factor(im, config) for im in images]
    shape = lat_hw + (4,)
    noise = [initial_noise(config, k, shape) for k in range(n)]
    mask_states = [None] * n
    for k, m in enumerate(masks or [None] * n):
        if m is not None:
            mask_states[k] = _MaskState(mask_to_latent(m, lat_hw), encode_image(images[k], lat_hw), noise[k])

    result = EditResult(images=[None] * n, latents=[None] * n)
    t_start = time.perf_counter()
    anchor_latent = None
    for j in range(n):
        if j == a:
            continue
        t0 = time.perf_counter()
        try:
            if corrs and j in corrs:
                corr = corrs[j]
            else:
                look = get_correspondence(images[a], images[j], cache, config.corr_source, repair)
                corr = look.forward
                result.cache_keys[j] = look.key
                result.cache_hits[j] = look.cache_hit
            frac = corr.valid_fraction()
            if frac < config.valid_floor:
                raise DegradedCorrespondenceError(
                    f"pair (anchor {a}, image {j}): valid correspondence fraction {frac:.3f} "
                    f"below floor {config.valid_floor}", pair=(a, j), valid_fraction=frac)
        except DegradedCorrespondenceError as exc:
            if not partial:
                raise
            result.errors[j] = str(exc)
            continue
        corr_lat = downsample_corr(corr, *lat_hw, src_out_shape=lat_hw)
        tok = backend.token_shape
        corr_tok = corr_lat if tuple(tok) == lat_hw else downsample_corr(corr, *tok, src_out_shape=tuple(tok))
        z_j = noise[j]
        if config.noise_mode == "aligned":
            z_j = gather_source(noise[a], noise[j], corr_lat)
        xa, xb = sample_pair(backend, noise[a], z_j, corr_lat, corr_tok, config, j,
                             (mask_states[a], mask_states[j]))
        if anchor_latent is None:
            anchor_latent = xa
        result.latents[j] = xb
        result.images[j] = decode_latent(xb, factors[j])
        result.timings[f"pair_{a}_{j}"] = time.perf_counter() - t0
        result.reports[j] = (corr, None)
    if anchor_latent is None:
        anchor_latent = sample_single(backend, noise[a], config, mask_states[a])
    result.latents[a] = anchor_latent
    result.images[a] = decode_latent(anchor_latent, factors[a])
    for j, (corr, _) in list(result.reports.items()):
        try:
            result.reports[j] = consistency_score(result.images[a], result.images[j], corr,
                                                  seed=config.seed)
        except MetricError as exc:
            log.warning("no consistency score for pair (%d, %d): %s", a, j, exc)
            del result.reports[j]
    result.timings["total"] = time.perf_counter() - t_start
    return result


def edit_pair(images: list, config: EditConfig | None = None, **kwargs) -> EditResult:
    if len(images) != 2:
        raise ParameterError("edit_pair takes exactly two images")
    return edit_group(images, config, **kwargs)


def baseline_sample(config: EditConfig, image_index: int, backend=None, image_size: int = 64,
                    mask=None, image=None) -> np.ndarray:
    """Independent single-image DDIM+CFG sample with the run's per-image seed."""
    backend = backend or make_backend(config)
    lat_hw = (config.latent_size, config.latent_size)
    z = initial_noise(config, image_index, lat_hw + (4,))
    state = None
    if mask is not None:
        state = _MaskState(mask_to_latent(mask, lat_hw), encode_image(image, lat_hw), z)
    return decode_latent(sample_single(backend, z, config, state), image_size // config.latent_size)
