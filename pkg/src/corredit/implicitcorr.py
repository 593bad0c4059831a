"""Correspondence read off attention similarity, and a harness comparing it
with the explicit descriptor matcher across layers and denoising steps.

The comparison runs at native token resolution: ground truth is downsampled
to the token grid and the pixel threshold is scaled by the token stride.
Attention features are not upsampled first.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corrfield import CorrField, downsample_corr, extract_correspondence, pck
from .denoise.toy import NULL_CONDITION, ToyDenoiserParams, encode_image, init_params, toy_eps
from .errors import ParameterError, ShapeError
from .imageio import check_image, write_image
from .schedule import NoiseSchedule, ddim_invert, make_schedule, timestep_subsequence

REPORT_SCHEMA = "corredit.compare/1"


def _as_grid(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeError(f"token grid must be (h, w, d), got shape {X.shape}")
    return X


def _logits(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    d = Q.shape[-1]
    return Q.reshape(-1, d) @ K.reshape(-1, d).T / np.sqrt(d)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def implicit_match(Q_i: np.ndarray, K_j: np.ndarray) -> CorrField:
    """Match every token of image ``i`` to its most similar key in ``j``.

    Confidence is the softmax probability of the chosen key; ties go to the
    lowest flat key index (``np.argmax`` semantics).
    """
    Q_i, K_j = _as_grid(Q_i), _as_grid(K_j)
    if Q_i.shape[-1] != K_j.shape[-1]:
        raise ShapeError(f"query dim {Q_i.shape[-1]} != key dim {K_j.shape[-1]}")
    h, w, _ = Q_i.shape
    kh, kw, _ = K_j.shape
    probs = _softmax_rows(_logits(Q_i, K_j))
    best = np.argmax(probs, axis=1)
    conf = probs[np.arange(best.size), best]
    src = np.stack([best % kw, best // kw], axis=-1).astype(np.float64).reshape(h, w, 2)
    return CorrField(src, np.ones((h, w), bool), conf.reshape(h, w), (kh, kw))


@dataclass
class AttnMap:
    point: tuple[int, int]
    layer: int
    step: int
    heatmap: np.ndarray

    def __post_init__(self):
        if self.heatmap.ndim != 2 or np.any(self.heatmap < 0):
            raise ShapeError("heatmap must be a non-negative 2-D array")
        if abs(self.heatmap.sum() - 1.0) > 1e-6:
            raise ShapeError("heatmap does not sum to 1")

    def to_image(self) -> np.ndarray:
        """Heatmap scaled so its peak is white, as an ``(h, w, 1)`` image."""
        peak = self.heatmap.max()
        return (self.heatmap / peak)[:, :, None] if peak > 0 else self.heatmap[:, :, None]


def attention_map(Q_i: np.ndarray, K_j: np.ndarray, point: tuple[int, int],
                  layer_idx: int, step_idx: int) -> AttnMap:
    """Softmax similarity of the query at ``point = (x, y)`` over all keys."""
    Q_i, K_j = _as_grid(Q_i), _as_grid(K_j)
    if Q_i.shape[-1] != K_j.shape[-1]:
        raise ShapeError(f"query dim {Q_i.shape[-1]} != key dim {K_j.shape[-1]}")
    x, y = point
    h, w, d = Q_i.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ParameterError(f"point {point} outside the {w}x{h} query grid")
    row = _softmax_rows(_logits(Q_i[y:y + 1, x:x + 1], K_j))[0]
    return AttnMap((int(x), int(y)), int(layer_idx), int(step_idx), row.reshape(K_j.shape[:2]))


# --- comparison study --------------------------------------------------


@dataclass
class StudyConfig:
    layers: tuple[int, ...] = (1, 2, 4, 8, 10)
    steps: tuple[int, ...] = (10, 20, 35)
    num_steps: int = 50
    threshold_px: float = 2.0
    denoiser_seed: int = 0
    inversion_iters: int = 2
    heatmap_points: tuple[tuple[int, int], ...] = ((8, 8),)


@dataclass
class CompareReport:
    pair_id: str
    threshold_px: float
    explicit_pck: float
    implicit_pck: dict[int, dict[int, float]]
    token_threshold: float
    maps: list[AttnMap] = field(default_factory=list)

    @property
    def spread(self) -> float:
        vals = [v for row in self.implicit_pck.values() for v in row.values()]
        return float(max(vals) - min(vals))

    @property
    def best_implicit(self) -> float:
        return float(max(v for row in self.implicit_pck.values() for v in row.values()))

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "note": "implicit matches evaluated at token resolution; gt downsampled, "
                    "threshold scaled by the token stride",
            "pair_id": self.pair_id,
            "threshold_px": self.threshold_px,
            "token_threshold": self.token_threshold,
            "explicit_pck": self.explicit_pck,
            "implicit_pck": {str(l): {str(s): v for s, v in row.items()}
                             for l, row in self.implicit_pck.items()},
            "spread": self.spread,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        steps = sorted(next(iter(self.implicit_pck.values())))
        head = ["layer"] + [f"step {s}" for s in steps]
        rows = [[f"{l}"] + [f"{self.implicit_pck[l][s]:.3f}" for s in steps]
                for l in sorted(self.implicit_pck)]
        rows.append(["explicit"] + [f"{self.explicit_pck:.3f}"] * len(steps))
        widths = [max(len(r[c]) for r in [head] + rows) for c in range(len(head))]
        fmt = lambda r: "  ".join(v.rjust(wd) for v, wd in zip(r, widths))
        lines = [f"pair {self.pair_id}  PCK@{self.threshold_px:g}px", fmt(head)]
        lines += [fmt(r) for r in rows]
        lines.append(f"implicit spread {self.spread:.3f}")
        return "\n".join(lines)

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "compare.json", out_dir / "compare.txt"]
        paths[0].write_text(self.to_json())
        paths[1].write_text(self.to_text() + "\n")
        for m in self.maps:
            p = out_dir / f"attn_l{m.layer}_s{m.step}_x{m.point[0]}_y{m.point[1]}.pgm"
            write_image(p, m.to_image())
            paths.append(p)
        return paths


def capture_qk(image: np.ndarray, params: ToyDenoiserParams, schedule: NoiseSchedule,
               num_steps: int, steps: list[int], inversion_iters: int = 2) -> dict:
    """Invert ``image`` and record ``(Q, K)`` per ``(layer, step)``.

    Step ``k`` (1-based, sampling order) uses the inverted latent at the
    ``k``-th timestep of the sampling subsequence.
    """
    arch = params.arch
    z0 = encode_image(image, (arch.latent_h, arch.latent_w))
    eps_fn = lambda x, t: toy_eps(x, t, NULL_CONDITION, params, schedule)
    _, traj = ddim_invert(z0, eps_fn, schedule, num_steps,
                          fixed_point_iters=inversion_iters, return_trajectory=True)
    timesteps = timestep_subsequence(schedule, num_steps)
    out = {}
    for k in steps:
        t = timesteps[k - 1]
        capture = {}
        toy_eps(traj[t], t, NULL_CONDITION, params, schedule, capture=capture)
        for (_, layer), (q, kk, _) in capture.items():
            out[(layer, k)] = (q, kk)
    return out


def compare_study(img_src: np.ndarray, img_tgt: np.ndarray, gt: CorrField,
                  cfg: StudyConfig | None = None, pair_id: str = "pair",
                  params: ToyDenoiserParams | None = None,
                  schedule: NoiseSchedule | None = None) -> CompareReport:
    """PCK of implicit attention matches per (layer, step) against the
    explicit extractor, for a pair whose ``gt`` maps target to source."""
    cfg = cfg or StudyConfig()
    if not cfg.layers or not cfg.steps:
        raise ParameterError("layer and step sets must be non-empty")
    img_src, img_tgt = check_image(img_src), check_image(img_tgt)
    params = params or init_params(cfg.denoiser_seed)
    schedule = schedule or make_schedule(params.arch.num_train_steps)
    arch = params.arch
    for layer in cfg.layers:
        if not 1 <= layer <= arch.layers:
            raise ParameterError(f"layer {layer} outside 1..{arch.layers}")
    for step in cfg.steps:
        if not 1 <= step <= cfg.num_steps:
            raise ParameterError(f"step {step} outside 1..{cfg.num_steps}")

    explicit, _ = extract_correspondence(img_src, img_tgt)
    explicit_pck = pck(explicit, gt, cfg.threshold_px)

    th, tw = arch.token_shape
    gt_tok = downsample_corr(gt, th, tw, src_out_shape=(th, tw))
    stride = gt.shape[1] / tw
    tok_thr = cfg.threshold_px / stride
    steps = sorted(set(cfg.steps))
    qk_src = capture_qk(img_src, params, schedule, cfg.num_steps, steps, cfg.inversion_iters)
    qk_tgt = capture_qk(img_tgt, params, schedule, cfg.num_steps, steps, cfg.inversion_iters)

    implicit: dict[int, dict[int, float]] = {}
    maps = []
    for layer in sorted(set(cfg.layers)):
        implicit[layer] = {}
        for step in steps:
            q_t, k_s = qk_tgt[(layer, step)][0], qk_src[(layer, step)][1]
            implicit[layer][step] = pck(implicit_match(q_t, k_s), gt_tok, tok_thr)
            for pt in cfg.heatmap_points:
                maps.append(attention_map(q_t, k_s, pt, layer, step))
    return CompareReport(pair_id, cfg.threshold_px, explicit_pck, implicit, tok_thr, maps)
