"""Dense cross-image correspondence: extraction, filtering, resampling and scoring.

A :class:`CorrField` lives on the *target* image's grid and stores, for each
target cell, the continuous ``(x, y)`` coordinate of its match in the *source*
image. The extractor is a classical multi-scale descriptor (normalized patch
intensities plus gradient-orientation histograms) matched coarse-to-fine.
Any other extractor can be plugged in as long as it returns a ``CorrField``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError, MetricError, ParameterError, ShapeError
from .imageio import check_image, to_gray

# Instrumentation for the cache-first contract; reset freely in tests.
STATS = {"descriptors": 0, "matches": 0}


@dataclass
class CorrField:
    """Target-to-source coordinate map with validity and confidence.

    ``src_xy[y, x] = (sx, sy)`` is the source coordinate matched to target
    cell ``(x, y)``. Invalid cells are ignored by every consumer.
    """

    src_xy: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray
    src_shape: tuple[int, int] = None  # (height, width) of the source grid

    def __post_init__(self):
        self.src_xy = np.asarray(self.src_xy, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        h, w = self.valid.shape
        if self.src_xy.shape != (h, w, 2) or self.confidence.shape != (h, w):
            raise ShapeError("CorrField arrays disagree on grid shape")
        if self.src_shape is None:
            self.src_shape = (h, w)
        self.src_shape = (int(self.src_shape[0]), int(self.src_shape[1]))
        sh, sw = self.src_shape
        finite = np.all(np.isfinite(self.src_xy), axis=2)
        inside = (
            finite
            & (self.src_xy[..., 0] >= 0) & (self.src_xy[..., 0] <= sw - 1)
            & (self.src_xy[..., 1] >= 0) & (self.src_xy[..., 1] <= sh - 1)
        )
        self.valid = self.valid & inside
        self.confidence = np.where(self.valid, np.clip(self.confidence, 0.0, 1.0), 0.0)

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    def rounded_source(self) -> tuple[np.ndarray, np.ndarray]:
        """Nearest source cell (row, col) index arrays, clamped to bounds."""
        sh, sw = self.src_shape
        sx = np.clip(np.rint(self.src_xy[..., 0]), 0, sw - 1).astype(np.intp)
        sy = np.clip(np.rint(self.src_xy[..., 1]), 0, sh - 1).astype(np.intp)
        return sy, sx

    @classmethod
    def identity(cls, height: int, width: int) -> "CorrField":
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        return cls(np.stack([xx, yy], axis=-1), np.ones((height, width), bool),
                   np.ones((height, width)))

    @classmethod
    def translation(cls, height: int, width: int, dx: float, dy: float) -> "CorrField":
        """Field for a target that is the source shifted by ``(dx, dy)``."""
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        return cls(np.stack([xx - dx, yy - dy], axis=-1),
                   np.ones((height, width), bool), np.ones((height, width)))

    @classmethod
    def invalid(cls, height: int, width: int, src_shape=None) -> "CorrField":
        return cls(np.zeros((height, width, 2)), np.zeros((height, width), bool),
                   np.zeros((height, width)), src_shape)

    def equals(self, other: "CorrField") -> bool:
        return (
            self.src_shape == other.src_shape
            and np.array_equal(self.src_xy, other.src_xy)
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.confidence, other.confidence)
        )

    # --- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        """``ECF1`` little-endian encoding: header then one record per cell."""
        header = _ECF_MAGIC + struct.pack("<5I", _ECF_VERSION, self.height, self.width,
                                          *self.src_shape)
        rec = np.empty(self.height * self.width, dtype=_ECF_RECORD)
        rec["x"] = self.src_xy[..., 0].ravel()
        rec["y"] = self.src_xy[..., 1].ravel()
        rec["conf"] = self.confidence.ravel()
        rec["valid"] = self.valid.ravel()
        return header + rec.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CorrField":
        if len(blob) < 24 or blob[:4] != _ECF_MAGIC:
            raise ParameterError("not an ECF1 correspondence blob")
        version, h, w, sh, sw = struct.unpack("<5I", blob[4:24])
        if version != _ECF_VERSION:
            raise ParameterError(f"unsupported ECF version {version}")
        body = blob[24:]
        if len(body) != h * w * _ECF_RECORD.itemsize:
            raise ParameterError("ECF1 blob length does not match its header")
        rec = np.frombuffer(body, dtype=_ECF_RECORD)
        return cls(
            np.stack([rec["x"], rec["y"]], axis=-1).reshape(h, w, 2),
            rec["valid"].astype(bool).reshape(h, w),
            rec["conf"].reshape(h, w),
            (sh, sw),
        )

    def to_json(self) -> str:
        """Human-readable debug dump (not used for round-tripping)."""
        return json.dumps({
            "schema": "corrfield.debug@1",
            "height": self.height,
            "width": self.width,
            "src_shape": list(self.src_shape),
            "valid_fraction": self.valid_fraction(),
            "src_x": np.round(self.src_xy[..., 0], 4).tolist(),
            "src_y": np.round(self.src_xy[..., 1], 4).tolist(),
            "valid": self.valid.astype(int).tolist(),
            "confidence": np.round(self.confidence, 4).tolist(),
        })


_ECF_MAGIC = b"ECF1"
_ECF_VERSION = 1
_ECF_RECORD = np.dtype([("x", "<f8"), ("y", "<f8"), ("conf", "<f8"), ("valid", "u1")])


def gather_source(values_src: np.ndarray, values_tgt: np.ndarray, corr: CorrField) -> np.ndarray:
    """Nearest-neighbor remap: valid target cells take the source value at
    the rounded matched cell, invalid cells keep the target's own value."""
    if values_tgt.shape[:2] != corr.shape:
        raise ShapeError(f"target grid {values_tgt.shape[:2]} != corr grid {corr.shape}")
    if values_src.shape[:2] != corr.src_shape:
        raise ShapeError(f"source grid {values_src.shape[:2]} != corr source {corr.src_shape}")
    sy, sx = corr.rounded_source()
    out = values_tgt.copy()
    out[corr.valid] = values_src[sy[corr.valid], sx[corr.valid]]
    return out


# --- descriptors -----------------------------------------------------------


@dataclass(frozen=True)
class DescriptorConfig:
    levels: int = 3
    patch_radius: int = 3
    hist_bins: int = 8
    hist_cells: int = 2
    hist_weight: float = 1.0
    # Constant component so flat regions still get a unit descriptor.
    bias: float = 1e-3


@dataclass
class DescriptorPyramid:
    """Per-level descriptor grids, finest first; ``scales[k] = 2**-k``."""

    levels: list[np.ndarray]
    scales: list[float]
    config: DescriptorConfig = field(default_factory=DescriptorConfig)


def _halve(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape[0] // 2 * 2, gray.shape[1] // 2 * 2
    g = gray[:h, :w]
    return 0.25 * (g[0::2, 0::2] + g[1::2, 0::2] + g[0::2, 1::2] + g[1::2, 1::2])


def _level_descriptors(gray: np.ndarray, cfg: DescriptorConfig) -> np.ndarray:
    r = cfg.patch_radius
    k = 2 * r + 1
    padded = np.pad(gray, r, mode="reflect")
    patches = sliding_window_view(padded, (k, k)).reshape(gray.shape[0], gray.shape[1], k * k)
    patches = patches - patches.mean(axis=2, keepdims=True)
    norm = np.linalg.norm(patches, axis=2, keepdims=True)
    patches = np.where(norm > 1e-9, patches / np.maximum(norm, 1e-12), 0.0)

    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi) / (2 * np.pi) * cfg.hist_bins
    lo = np.floor(ang).astype(int) % cfg.hist_bins
    hi = (lo + 1) % cfg.hist_bins
    w_hi = ang - np.floor(ang)
    cell = max(k // cfg.hist_cells, 1)
    # Sub-cell centres laid out symmetrically inside the patch window.
    offsets = (np.arange(cfg.hist_cells) - (cfg.hist_cells - 1) / 2) * cell
    offsets = np.rint(offsets).astype(int)
    hists = []
    for b in range(cfg.hist_bins):
        energy = mag * ((lo == b) * (1 - w_hi) + (hi == b) * w_hi)
        box = ndimage.uniform_filter(energy, size=cell, mode="reflect")
        pad = np.pad(box, r + cell, mode="reflect")
        for oy in offsets:
            for ox in offsets:
                s0, s1 = r + cell + oy, r + cell + ox
                hists.append(pad[s0:s0 + gray.shape[0], s1:s1 + gray.shape[1]])
    hist = np.stack(hists, axis=-1)
    hnorm = np.linalg.norm(hist, axis=2, keepdims=True)
    hist = np.where(hnorm > 1e-9, hist / np.maximum(hnorm, 1e-12), 0.0)

    bias = np.full(gray.shape + (1,), cfg.bias)
    desc = np.concatenate([patches, cfg.hist_weight * hist, bias], axis=2)
    return desc / np.linalg.norm(desc, axis=2, keepdims=True)


def compute_descriptors(image: np.ndarray, cfg: DescriptorConfig | None = None) -> DescriptorPyramid:
    """Build an L2-normalized descriptor pyramid for one image."""
    cfg = cfg or DescriptorConfig()
    image = check_image(image)
    if cfg.levels < 1:
        raise ConfigError("descriptor pyramid needs at least one level")
    window = 2 * cfg.patch_radius + 1
    need = window * 2 ** (cfg.levels - 1)
    if min(image.shape[:2]) < need:
        raise ParameterError(
            f"image {image.shape[0]}x{image.shape[1]} is smaller than the largest patch "
            f"window ({need}px for {cfg.levels} levels of radius {cfg.patch_radius})"
        )
    STATS["descriptors"] += 1
    gray = to_gray(image)
    levels, scales = [], []
    for k in range(cfg.levels):
        if k:
            gray = _halve(gray)
        levels.append(_level_descriptors(gray, cfg))
        scales.append(2.0 ** -k)
    return DescriptorPyramid(levels, scales, cfg)


# --- matching --------------------------------------------------------------


@dataclass(frozen=True)
class MatchConfig:
    search_radius: int = 2
    min_confidence: float = 0.6
    cycle_tol_px: float = 2.0


def _best_in_window(dt: np.ndarray, ds: np.ndarray, prior: np.ndarray, radius: int):
    """For every target descriptor, best source cell within ``radius`` of its
    prior position. Exact ties go to the candidate nearest the prior."""
    hs, ws = ds.shape[:2]
    ht, wt = dt.shape[:2]
    center = np.rint(prior).astype(int)
    center[..., 0] = np.clip(center[..., 0], 0, ws - 1)
    center[..., 1] = np.clip(center[..., 1], 0, hs - 1)
    offs = np.arange(-radius, radius + 1)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    cx = np.clip(center[..., 0, None] + ox.ravel(), 0, ws - 1)  # (ht, wt, K)
    cy = np.clip(center[..., 1, None] + oy.ravel(), 0, hs - 1)
    cand = ds[cy, cx]  # (ht, wt, K, d)
    score = np.einsum("hwkd,hwd->hwk", cand, dt)
    dist2 = (cx - prior[..., 0, None]) ** 2 + (cy - prior[..., 1, None]) ** 2
    best = np.argmax(score - 1e-9 * dist2, axis=2)
    idx = np.arange(ht)[:, None], np.arange(wt)[None, :], best
    return cx[idx], cy[idx], score[idx]


def _best_global(dt: np.ndarray, ds: np.ndarray, prior: np.ndarray):
    hs, ws = ds.shape[:2]
    ht, wt = dt.shape[:2]
    flat_s = ds.reshape(-1, ds.shape[2])
    flat_t = dt.reshape(-1, dt.shape[2])
    sy, sx = np.divmod(np.arange(hs * ws), ws)
    pri = prior.reshape(-1, 2)
    bx = np.empty(len(flat_t), int)
    by = np.empty(len(flat_t), int)
    bs = np.empty(len(flat_t))
    chunk = 1024
    for start in range(0, len(flat_t), chunk):
        sl = slice(start, start + chunk)
        score = flat_t[sl] @ flat_s.T
        dist2 = (sx[None] - pri[sl, 0, None]) ** 2 + (sy[None] - pri[sl, 1, None]) ** 2
        best = np.argmax(score - 1e-9 * dist2, axis=1)
        bx[sl], by[sl] = sx[best], sy[best]
        bs[sl] = score[np.arange(len(best)), best]
    return bx.reshape(ht, wt), by.reshape(ht, wt), bs.reshape(ht, wt)


def match_correspondence(desc_src: DescriptorPyramid, desc_tgt: DescriptorPyramid,
                         cfg: MatchConfig | None = None) -> CorrField:
    """Coarse-to-fine nearest-neighbor matching from target cells to source cells.

    The coarsest level is searched exhaustively; each finer level searches a
    ``(2r+1)^2`` window around the upsampled parent match. Confidence is the
    cosine similarity of the matched descriptors.
    """
    cfg = cfg or MatchConfig()
    if desc_src.config != desc_tgt.config or len(desc_src.levels) != len(desc_tgt.levels):
        raise ConfigError("descriptor pyramids were built with different configs")
    STATS["matches"] += 1
    n = len(desc_src.levels)
    bx = by = None
    for k in range(n - 1, -1, -1):
        ds, dt = desc_src.levels[k], desc_tgt.levels[k]
        ht, wt = dt.shape[:2]
        hs, ws = ds.shape[:2]
        yy, xx = np.mgrid[0:ht, 0:wt].astype(np.float64)
        if bx is None:
            # Same relative position is the prior; only used to break ties.
            prior = np.stack([(xx + 0.5) * ws / wt - 0.5, (yy + 0.5) * hs / ht - 0.5], axis=-1)
            bx, by, bs = _best_global(dt, ds, prior)
            continue
        ph, pw = bx.shape
        py = np.minimum(yy.astype(int) // 2, ph - 1)
        px = np.minimum(xx.astype(int) // 2, pw - 1)
        prior = np.stack([
            2 * bx[py, px] + 0.5 + (xx - (2 * px + 0.5)),
            2 * by[py, px] + 0.5 + (yy - (2 * py + 0.5)),
        ], axis=-1)
        bx, by, bs = _best_in_window(dt, ds, prior, cfg.search_radius)
    conf = np.clip(bs, 0.0, 1.0)
    src_shape = desc_src.levels[0].shape[:2]
    return CorrField(np.stack([bx, by], axis=-1).astype(np.float64),
                     conf >= cfg.min_confidence, conf, src_shape)


def cyclic_filter(corr_ij: CorrField, corr_ji: CorrField, round_trip_tol_px: float) -> CorrField:
    """Keep cells of ``corr_ij`` whose round trip through ``corr_ji`` lands
    within ``round_trip_tol_px`` of the starting cell.

    ``corr_ij`` maps target j cells to source i coordinates, ``corr_ji`` maps
    i cells back to j coordinates.
    """
    if corr_ij.src_shape != corr_ji.shape or corr_ji.src_shape != corr_ij.shape:
        raise ConfigError("forward and backward fields cover different resolutions")
    sy, sx = corr_ij.rounded_source()
    back = corr_ji.src_xy[sy, sx]
    yy, xx = np.mgrid[0:corr_ij.height, 0:corr_ij.width]
    err = np.hypot(back[..., 0] - xx, back[..., 1] - yy)
    keep = corr_ij.valid & corr_ji.valid[sy, sx] & (err <= round_trip_tol_px)
    return CorrField(corr_ij.src_xy.copy(), keep, corr_ij.confidence.copy(), corr_ij.src_shape)


def extract_correspondence(img_src: np.ndarray, img_tgt: np.ndarray,
                           desc_cfg: DescriptorConfig | None = None,
                           match_cfg: MatchConfig | None = None) -> tuple[CorrField, CorrField]:
    """Cycle-filtered fields ``(tgt -> src, src -> tgt)`` for an image pair."""
    match_cfg = match_cfg or MatchConfig()
    d_src = compute_descriptors(img_src, desc_cfg)
    d_tgt = compute_descriptors(img_tgt, desc_cfg)
    fwd = match_correspondence(d_src, d_tgt, match_cfg)
    bwd = match_correspondence(d_tgt, d_src, match_cfg)
    tol = match_cfg.cycle_tol_px
    return cyclic_filter(fwd, bwd, tol), cyclic_filter(bwd, fwd, tol)


def downsample_corr(corr: CorrField, out_h: int, out_w: int,
                    src_out_shape: tuple[int, int] | None = None) -> CorrField:
    """Resample a field to a coarser grid (e.g. image pixels to latent tokens).

    Each output cell covers a block of input cells. It is valid when at least
    half of the block is valid; its coordinate comes from the valid cell
    nearest the block centre, with the displacement rescaled to the new grid.
    """
    if out_h <= 0 or out_w <= 0:
        raise ConfigError("output dimensions must be positive")
    h, w = corr.shape
    if out_h > h or out_w > w:
        raise ConfigError(f"cannot downsample {h}x{w} to larger {out_h}x{out_w}")
    sh, sw = corr.src_shape
    if src_out_shape is None:
        src_out_shape = (max(1, round(sh * out_h / h)), max(1, round(sw * out_w / w)))
    soh, sow = src_out_shape
    ry, rx = out_h / h, out_w / w
    sry, srx = soh / sh, sow / sw

    src_xy = np.zeros((out_h, out_w, 2))
    valid = np.zeros((out_h, out_w), bool)
    conf = np.zeros((out_h, out_w))
    rows = (np.arange(out_h + 1) * h) // out_h
    cols = (np.arange(out_w + 1) * w) // out_w
    for oy in range(out_h):
        y0, y1 = rows[oy], rows[oy + 1]
        for ox in range(out_w):
            x0, x1 = cols[ox], cols[ox + 1]
            block = corr.valid[y0:y1, x0:x1]
            if block.mean() < 0.5:
                continue
            cy, cx = (y0 + y1 - 1) / 2, (x0 + x1 - 1) / 2
            vy, vx = np.nonzero(block)
            d2 = (vy + y0 - cy) ** 2 + (vx + x0 - cx) ** 2
            pick = int(np.argmin(d2))  # first minimum: row-major tie-break
            ty, tx = vy[pick] + y0, vx[pick] + x0
            s = corr.src_xy[ty, tx]
            # Move from the picked cell to the block centre in output units.
            nx = (s[0] + 0.5) * srx - 0.5 + (ox - ((tx + 0.5) * rx - 0.5)) * (srx / rx)
            ny = (s[1] + 0.5) * sry - 0.5 + (oy - ((ty + 0.5) * ry - 0.5)) * (sry / ry)
            if -0.5 <= nx <= sow - 0.5 and -0.5 <= ny <= soh - 0.5:
                src_xy[oy, ox] = (min(max(nx, 0.0), sow - 1), min(max(ny, 0.0), soh - 1))
                valid[oy, ox] = True
                conf[oy, ox] = corr.confidence[ty, tx]
    return CorrField(src_xy, valid, conf, (soh, sow))


# --- synthetic ground truth -------------------------------------------------


@dataclass(frozen=True)
class Affine:
    """Maps source coordinates to target coordinates: ``t = A @ [x, y, 1]``."""

    matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Affine":
        return cls(((1.0, 0.0, dx), (0.0, 1.0, dy)))

    @classmethod
    def similarity(cls, angle_deg: float, scale: float, dx: float, dy: float,
                   center: tuple[float, float]) -> "Affine":
        """Rotate and scale about ``center``, then translate."""
        a = np.deg2rad(angle_deg)
        c, s = scale * np.cos(a), scale * np.sin(a)
        cx, cy = center
        return cls(((c, -s, cx - c * cx + s * cy + dx), (s, c, cy - s * cx - c * cy + dy)))

    def target_to_source(self, xt: np.ndarray, yt: np.ndarray):
        m = np.asarray(self.matrix, dtype=np.float64)
        lin = m[:, :2]
        if abs(np.linalg.det(lin)) < 1e-8:
            raise ParameterError("affine warp is not invertible")
        inv = np.linalg.inv(lin)
        dx, dy = xt - m[0, 2], yt - m[1, 2]
        return inv[0, 0] * dx + inv[0, 1] * dy, inv[1, 0] * dx + inv[1, 1] * dy


@dataclass(frozen=True)
class ThinPlate:
    """Thin-plate-spline displacement field defined in the target frame.

    ``points`` are target-frame control points and ``displacements`` the
    offsets to their source positions; source = target + interpolated offset.
    """

    points: tuple
    displacements: tuple

    def target_to_source(self, xt: np.ndarray, yt: np.ndarray):
        p = np.asarray(self.points, dtype=np.float64)
        d = np.asarray(self.displacements, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or d.shape != p.shape or len(p) < 3:
            raise ParameterError("thin-plate warp needs >= 3 control points with matching displacements")
        k = len(p)
        P = np.hstack([np.ones((k, 1)), p])
        if np.linalg.matrix_rank(P) < 3:
            raise ParameterError("thin-plate control points are collinear")
        L = np.zeros((k + 3, k + 3))
        L[:k, :k] = _tps_kernel(np.linalg.norm(p[:, None] - p[None], axis=2))
        L[:k, k:] = P
        L[k:, :k] = P.T
        rhs = np.zeros((k + 3, 2))
        rhs[:k] = d
        coef = np.linalg.solve(L, rhs)
        pts = np.stack([xt.ravel(), yt.ravel()], axis=1)
        U = _tps_kernel(np.linalg.norm(pts[:, None] - p[None], axis=2))
        disp = U @ coef[:k] + np.hstack([np.ones((len(pts), 1)), pts]) @ coef[k:]
        return (xt + disp[:, 0].reshape(xt.shape), yt + disp[:, 1].reshape(yt.shape))


def _tps_kernel(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, r * r * np.log(np.maximum(r, 1e-300)), 0.0)


@dataclass(frozen=True)
class Jitter:
    gain: float = 1.0
    bias: float = 0.0
    noise_std: float = 0.0


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def synth_pair(image: np.ndarray, warp: Affine | ThinPlate, jitter: Jitter | None = None,
               seed: int = 0) -> tuple[np.ndarray, CorrField]:
    """Render a warped, photometrically jittered copy and its ground truth.

    The returned field maps the new (target) image to ``image`` (source);
    target cells whose source falls outside the image are invalid.
    """
    image = check_image(image)
    jitter = jitter or Jitter()
    h, w = image.shape[:2]
    yt, xt = np.mgrid[0:h, 0:w].astype(np.float64)
    xs, ys = warp.target_to_source(xt, yt)
    inside = (xs >= -1e-9) & (xs <= w - 1 + 1e-9) & (ys >= -1e-9) & (ys <= h - 1 + 1e-9)
    if inside.mean() < 0.5:
        raise ParameterError(f"warp keeps only {inside.mean():.1%} of pixels in bounds (< 50%)")
    xs = np.where(inside, np.clip(xs, 0, w - 1), xs)
    ys = np.where(inside, np.clip(ys, 0, h - 1), ys)
    out = sample_bilinear(image, xs, ys)
    out = out * jitter.gain + jitter.bias
    if jitter.noise_std > 0:
        out = out + np.random.default_rng(seed).normal(0.0, jitter.noise_std, out.shape)
    out = np.clip(out, 0.0, 1.0)
    gt = CorrField(np.stack([xs, ys], axis=-1), inside, inside.astype(np.float64), (h, w))
    return out, gt


def random_warp(rng: np.random.Generator, size: int, max_angle: float = 8.0,
                max_scale: float = 0.06, max_shift: float = 6.0) -> Affine:
    """Mild random similarity warp used by the synthetic benchmark."""
    return Affine.similarity(
        rng.uniform(-max_angle, max_angle), 1.0 + rng.uniform(-max_scale, max_scale),
        rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift),
        ((size - 1) / 2, (size - 1) / 2),
    )


def pck(pred: CorrField, gt: CorrField, threshold_px: float) -> float:
    """Fraction of ground-truth-valid cells predicted within ``threshold_px``."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction grid {pred.shape} != ground truth grid {gt.shape}")
    n = int(gt.valid.sum())
    if n == 0:
        raise MetricError("PCK is undefined: ground truth has no valid cells")
    err = np.linalg.norm(pred.src_xy - gt.src_xy, axis=2)
    hits = gt.valid & pred.valid & (err <= threshold_px)
    return float(hits.sum() / n)
