"""A small seeded attention denoiser and the fixed latent codec.

The network is untrained: weights are scaled-uniform draws from a seeded
generator. It predicts a residual on top of the Gaussian-prior posterior
mean, so the implied noise prediction keeps DDIM trajectories bounded, and
its self-attention layers are where Corr-Attention is applied.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from ..attn import AttnParams, GateConfig, gate, guided_attention, project_qkv, standard_attention
from ..corrfield import CorrField
from ..errors import ConfigError, ParameterError, ShapeError
from ..schedule import NoiseSchedule

NULL_CONDITION = 0
# Self-attention layer count of the reference backbone; gate thresholds
# are rescaled against it for shallower denoisers.
REFERENCE_DEPTH = 16


@dataclass(frozen=True)
class ToyArch:
    latent_h: int = 16
    latent_w: int = 16
    channels: int = 4
    patch: int = 1
    dim: int = 32
    layers: int = 10
    ff_mult: int = 2
    vocab: int = 8
    num_train_steps: int = 1000
    data_std: float = 0.5

    @property
    def token_shape(self) -> tuple[int, int]:
        return self.latent_h // self.patch, self.latent_w // self.patch


@dataclass
class ToyDenoiserParams:
    arch: ToyArch
    seed: int
    w_in: np.ndarray
    pos: np.ndarray
    t_table: np.ndarray
    c_table: np.ndarray
    attn: list[AttnParams] = field(default_factory=list)
    ff_in: list[np.ndarray] = field(default_factory=list)
    ff_out: list[np.ndarray] = field(default_factory=list)
    w_head: np.ndarray = None

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (used for checkpoints)."""
        out = [self.w_in, self.pos, self.t_table, self.c_table]
        for a, f1, f2 in zip(self.attn, self.ff_in, self.ff_out):
            out += [a.f_q, a.f_k, a.f_v, a.f_out, f1, f2]
        out.append(self.w_head)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions[:, None] * freqs[None]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


def init_params(seed: int, arch: ToyArch | None = None) -> ToyDenoiserParams:
    """Scaled-uniform init: each matrix drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    in a fixed order from ``numpy.random.default_rng(seed)``."""
    arch = arch or ToyArch()
    if arch.latent_h % arch.patch or arch.latent_w % arch.patch:
        raise ConfigError("latent size must be divisible by the patch size")
    if arch.dim % 2 or arch.layers < 1:
        raise ConfigError("token dim must be even and layers >= 1")
    rng = np.random.default_rng(seed)
    d = arch.dim
    pin = arch.channels * arch.patch ** 2

    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    th, tw = arch.token_shape
    pos = 0.5 * (_sinusoid(np.arange(th, dtype=float), d)[:, None, :]
                 + _sinusoid(np.arange(tw, dtype=float) + 0.5 * th, d)[None, :, :])
    t_table = _sinusoid(np.arange(arch.num_train_steps, dtype=float), d)
    params = ToyDenoiserParams(
        arch=arch, seed=seed,
        w_in=uni(pin, (pin, d)),
        pos=pos,
        t_table=t_table,
        c_table=uni(1, (arch.vocab, d)) * 0.5,
    )
    for _ in range(arch.layers):
        params.attn.append(AttnParams(uni(d, (d, d)), uni(d, (d, d)), uni(d, (d, d)), uni(d, (d, d))))
        params.ff_in.append(uni(d, (d, d * arch.ff_mult)))
        params.ff_out.append(uni(d * arch.ff_mult, (d * arch.ff_mult, d)))
    params.w_head = uni(d, (d, pin))
    return params


def resolve_layer_threshold(threshold: int, num_layers: int) -> int:
    """Map a backbone layer index onto a denoiser with ``num_layers`` layers."""
    if num_layers >= threshold:
        return threshold
    return max(1, int(round(threshold * num_layers / REFERENCE_DEPTH)))


# --- checkpoints -----------------------------------------------------------

_ETD_MAGIC = b"ETD1"


def save_params(params: ToyDenoiserParams, path: str | Path) -> None:
    header = json.dumps({"version": 1, "seed": params.seed, "arch": asdict(params.arch)}).encode()
    buf = io.BytesIO()
    buf.write(_ETD_MAGIC + struct.pack("<I", len(header)) + header)
    for a in params.arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path: str | Path) -> ToyDenoiserParams:
    blob = Path(path).read_bytes()
    if blob[:4] != _ETD_MAGIC:
        raise ParameterError(f"{path} is not an ETD1 checkpoint")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + n])
    arch = ToyArch(**header["arch"])
    # Re-create the layout, then overwrite every array from the file.
    params = init_params(header["seed"], arch)
    pos = 8 + n
    for a in params.arrays():
        size = a.size * 8
        chunk = blob[pos:pos + size]
        if len(chunk) != size:
            raise ParameterError(f"{path} is truncated")
        a[...] = np.frombuffer(chunk, dtype="<f8").reshape(a.shape)
        pos += size
    if pos != len(blob):
        raise ParameterError(f"{path} has trailing bytes")
    return params


# --- latent codec ----------------------------------------------------------

# Latent channels: per-cell R, G, B means and luma mean, on values mapped to
# [-1, 1]. Decoding inverts that 4x3 map in the least-squares sense.
_CODEC = np.vstack([np.eye(3), [0.299, 0.587, 0.114]])
_DECODE = np.linalg.pinv(_CODEC)


def encode_image(image: np.ndarray, latent_hw: tuple[int, int] = (16, 16)) -> np.ndarray:
    """Fixed patch encoder: channel means over each latent cell."""
    h, w = image.shape[:2]
    lh, lw = latent_hw
    if h % lh or w % lw or h // lh != w // lw:
        raise ShapeError(f"image {h}x{w} does not tile into latent {lh}x{lw}")
    f = h // lh
    rgb = image if image.shape[2] == 3 else np.repeat(image, 3, axis=2)
    means = (2.0 * rgb - 1.0).reshape(lh, f, lw, f, 3).mean(axis=(1, 3))
    return means @ _CODEC.T


def decode_latent(z: np.ndarray, factor: int = 4) -> np.ndarray:
    """Least-squares colour per cell, bilinearly upsampled; clipped to [0, 1]."""
    lh, lw = z.shape[:2]
    rgb = z @ _DECODE.T
    # Cell centres sit at factor*k + (factor-1)/2; zoom with grid_mode matches that.
    up = zoom(rgb, (factor, factor, 1), order=1, mode="nearest", grid_mode=True)
    return np.clip((up + 1.0) / 2.0, 0.0, 1.0)


# --- forward pass ----------------------------------------------------------


def _layer_norm(h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=-1, keepdims=True)
    var = h.var(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + 1e-5)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def _patchify(z: np.ndarray, p: int) -> np.ndarray:
    lh, lw, c = z.shape
    return z.reshape(lh // p, p, lw // p, p, c).transpose(0, 2, 1, 3, 4).reshape(lh // p, lw // p, p * p * c)


def _unpatchify(tok: np.ndarray, p: int, c: int) -> np.ndarray:
    th, tw, _ = tok.shape
    return tok.reshape(th, tw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(th * p, tw * p, c)


def _embed(z, t, condition, params, schedule):
    arch = params.arch
    a = schedule.abar(t)
    c_in = 1.0 / np.sqrt(a * arch.data_std ** 2 + 1.0 - a)
    if not 0 <= condition < arch.vocab:
        raise ParameterError(f"condition {condition} outside vocabulary [0, {arch.vocab})")
    h = (_patchify(z * c_in, arch.patch) @ params.w_in) + params.pos
    return h + params.t_table[t] + params.c_table[condition]


def _readout(h, z, t, params, schedule):
    arch = params.arch
    a = schedule.abar(t)
    sd2 = arch.data_std ** 2
    denom = a * sd2 + 1.0 - a
    c_skip = np.sqrt(a) * sd2 / denom
    c_out = arch.data_std * np.sqrt(1.0 - a) / np.sqrt(denom)
    net = np.tanh(_unpatchify(_layer_norm(h) @ params.w_head, arch.patch, arch.channels))
    x0 = c_skip * z + c_out * net
    return (z - np.sqrt(a) * x0) / np.sqrt(1.0 - a)


def _check_latent(z, arch):
    if z.shape != (arch.latent_h, arch.latent_w, arch.channels):
        raise ShapeError(f"latent shape {z.shape} != {(arch.latent_h, arch.latent_w, arch.channels)}")


def toy_eps(latents, t: int, condition, params: ToyDenoiserParams, schedule: NoiseSchedule,
            corr: CorrField | None = None, gate_cfg: GateConfig | None = None,
            step_idx: int = 0, capture: dict | None = None):
    """Noise prediction for one latent, or for an (anchor, target) pair.

    In paired mode the anchor always runs plain self-attention; in gated
    (layer, step) cells the target instead attends with correspondence-warped
    anchor queries against the anchor's keys and values. ``corr`` maps target
    tokens to anchor tokens. ``capture`` receives ``{(image, layer): (Q, K, V)}``
    with 1-based layer indices.
    """
    arch = params.arch
    paired = isinstance(latents, (tuple, list))
    zs = list(latents) if paired else [latents]
    if paired and len(zs) != 2:
        raise ConfigError("paired mode takes exactly two latents")
    conds = list(condition) if isinstance(condition, (tuple, list)) else [condition] * len(zs)
    for z in zs:
        _check_latent(z, arch)
    if paired:
        if corr is None:
            raise ConfigError("paired denoising needs a correspondence field")
        if corr.shape != arch.token_shape or corr.src_shape != arch.token_shape:
            raise ShapeError(f"corr grid {corr.shape} != token grid {arch.token_shape}")
    gate_cfg = gate_cfg or GateConfig(enabled=False)
    threshold = resolve_layer_threshold(gate_cfg.layer_threshold, arch.layers)
    gate_eff = GateConfig(gate_cfg.step_lo, gate_cfg.step_hi, threshold,
                          gate_cfg.warp_target, gate_cfg.enabled)

    hs = [_embed(z, t, c, params, schedule) for z, c in zip(zs, conds)]
    for li in range(arch.layers):
        layer = li + 1
        ap = params.attn[li]
        qkv = [project_qkv(_layer_norm(h), ap) for h in hs]
        if capture is not None:
            for k, item in enumerate(qkv):
                capture[(k, layer)] = item
        outs = [standard_attention(*qkv[0])]
        if paired:
            if gate(layer, step_idx, gate_eff):
                outs.append(guided_attention(*qkv[1], *qkv[0], corr, gate_eff.warp_target))
            else:
                outs.append(standard_attention(*qkv[1]))
        hs = [h + o @ ap.f_out for h, o in zip(hs, outs)]
        hs = [h + _gelu(_layer_norm(h) @ params.ff_in[li]) @ params.ff_out[li] for h in hs]
    eps = [_readout(h, z, t, params, schedule) for h, z in zip(hs, zs)]
    return tuple(eps) if paired else eps[0]
