"""``corredit`` command line: synth, extract, edit, compare, oracle.

Every command writes a JSON run manifest last, atomically. Exit codes:
0 success, 2 usage/config/parameter errors, 3 degraded correspondence,
4 I/O and cache integrity failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cache import CorrCache, md5_hex
from .config import load_config
from .corrfield import STATS, Affine, CorrField, Jitter, ThinPlate, pck, random_warp, synth_pair
from .denoise import AnalyticScoreModel, analytic_eps
from .errors import CorrEditError, DegradedCorrespondenceError, IntegrityError
from .errors import ParameterError
from .imageio import builtin_pattern, read_image, write_image
from .implicitcorr import StudyConfig, compare_study
from .pipeline import edit_group, get_correspondence
from .schedule import ddim_step, make_schedule, step_pairs, timestep_subsequence

log = logging.getLogger("corredit")

MANIFEST_SCHEMA = "corredit.manifest/1"
EXTRACT_SCHEMA = "corredit.extract/1"
CONSISTENCY_SCHEMA = "corredit.consistency/1"
ORACLE_SCHEMA = "corredit.oracle/1"
COMPARE_SUMMARY_SCHEMA = "corredit.compare-summary/1"

EXIT_OK, EXIT_USAGE, EXIT_DEGRADED, EXIT_IO = 0, 2, 3, 4


# --- helpers ---------------------------------------------------------------


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_json(path: Path, obj) -> None:
    write_atomic(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def file_digest(path: Path) -> str:
    return md5_hex(Path(path).read_bytes())


def load_input_image(path: str) -> np.ndarray:
    """Input images that cannot be read are a usage error, not an I/O fault."""
    try:
        return read_image(path)
    except (OSError, ValueError) as exc:
        raise ParameterError(f"cannot read image {path}: {exc}") from exc


def load_field(path: str) -> CorrField:
    try:
        return CorrField.from_bytes(Path(path).read_bytes())
    except (OSError, ValueError) as exc:
        raise ParameterError(f"cannot read correspondence file {path}: {exc}") from exc


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, command: str, out_dir: Path):
        self.command = command
        self.out_dir = Path(out_dir)
        self.config: dict = {}
        self.inputs: dict = {}
        self.outputs: list[Path] = []
        self.timings: dict = {}
        self.extra: dict = {}
        self._t0 = time.perf_counter()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def output(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def finish(self) -> Path:
        self.timings["total_s"] = time.perf_counter() - self._t0
        missing = [str(p) for p in self.outputs if not p.exists()]
        if missing:
            raise OSError(f"outputs missing at manifest time: {missing}")
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": [str(p) for p in self.outputs],
            "output_digests": {str(p): file_digest(p) for p in self.outputs},
            "timings": self.timings,
            **self.extra,
        }
        path = self.out_dir / "manifest.json"
        write_json(path, manifest)
        return path


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ParameterError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise ParameterError("empty integer list")
    return vals


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ParameterError(f"expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ParameterError(f"expected {n} numbers, got {len(vals)} in {text!r}")
    return vals


def parse_warp(spec: str, size: int, seed: int):
    """``identity``, ``translate:dx,dy``, ``similarity:deg,scale,dx,dy``,
    ``affine:a,b,c,d,e,f`` (source to target), ``random`` or
    ``tps:x,y,dx,dy;x,y,dx,dy;...`` (target-frame control points)."""
    kind, _, args = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "identity":
        return Affine()
    if kind == "translate":
        return Affine.translation(*_floats(args, 2))
    if kind == "similarity":
        deg, scale, dx, dy = _floats(args, 4)
        c = (size - 1) / 2
        return Affine.similarity(deg, scale, dx, dy, (c, c))
    if kind == "affine":
        v = _floats(args, 6)
        return Affine((tuple(v[:3]), tuple(v[3:])))
    if kind == "random":
        return random_warp(np.random.default_rng(seed), size)
    if kind == "tps":
        rows = [_floats(r, 4) for r in args.split(";") if r.strip()]
        return ThinPlate(tuple((r[0], r[1]) for r in rows), tuple((r[2], r[3]) for r in rows))
    raise ParameterError(f"unknown warp spec {spec!r}")


# --- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    run = Run("synth", args.out)
    if args.image:
        base = load_input_image(args.image)
        run.add_input(args.image)
    else:
        base = builtin_pattern(args.pattern, args.size, args.seed)
    warp = parse_warp(args.warp, base.shape[1], args.seed)
    jitter = Jitter(*_floats(args.jitter, 3)) if args.jitter else None
    target, gt = synth_pair(base, warp, jitter, seed=args.seed)
    run.config = {"pattern": args.pattern if not args.image else None, "image": args.image,
                  "size": args.size, "warp": args.warp, "jitter": args.jitter, "seed": args.seed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = args.format
    write_image(run.output(out / f"source.{ext}"), base)
    write_image(run.output(out / f"target.{ext}"), target)
    write_atomic(run.output(out / "gt.ecf"), gt.to_bytes())
    run.finish()
    print(f"wrote {out / f'source.{ext}'} {out / f'target.{ext}'} {out / 'gt.ecf'}")
    return EXIT_OK


def cmd_extract(args) -> int:
    run = Run("extract", args.out)
    src, tgt = load_input_image(args.source), load_input_image(args.target)
    run.add_input(args.source)
    run.add_input(args.target)
    cache = CorrCache(args.cache_dir) if args.cache_dir else None
    before = STATS["matches"]
    t0 = time.perf_counter()
    look = get_correspondence(src, tgt, cache, "cache" if cache else "compute", repair=args.repair)
    run.timings["extract_s"] = time.perf_counter() - t0
    calls = STATS["matches"] - before
    print("cache hit" if look.cache_hit else "cache miss")
    print(f"matcher invocations: {calls}")
    report = {"schema": EXTRACT_SCHEMA, "key": look.key, "cache_hit": look.cache_hit,
              "matcher_invocations": calls, "valid_fraction": look.forward.valid_fraction()}
    if args.gt:
        gt = load_field(args.gt)
        run.add_input(args.gt)
        report["threshold_px"] = args.threshold
        report["pck"] = pck(look.forward, gt, args.threshold)
        print(f"PCK@{args.threshold:g}px: {report['pck']:.4f}")
    out = Path(args.out)
    write_atomic(run.output(out / "corr.ecf"), look.forward.to_bytes())
    write_atomic(run.output(out / "corr_backward.ecf"), look.backward.to_bytes())
    write_json(run.output(out / "extract.json"), report)
    run.config = {"cache_dir": args.cache_dir, "repair": args.repair, "threshold_px": args.threshold}
    run.extra["cache"] = {"key": look.key, "hit": look.cache_hit}
    run.finish()
    return EXIT_OK


def _edit_overrides(args) -> dict:
    o = {}
    if args.steps is not None:
        o["num_steps"] = args.steps
    for name, key in (("lam", "lambda"), ("gamma", "gamma"), ("scale", "scale"),
                      ("gate_steps", "gate_steps"), ("gate_layer", "gate_layer"),
                      ("warp_target", "warp_target"), ("cfg_branches", "cfg_branches"),
                      ("anchor", "anchor_index"), ("seed", "seed"),
                      ("cache_dir", "cache_dir"), ("noise_mode", "noise_mode"),
                      ("denoiser", "denoiser")):
        v = getattr(args, name)
        if v is not None:
            o[key] = v
    if args.no_guidance:
        o["gate_enabled"] = False
        o["lambda"] = 0.0
    return o


def cmd_edit(args) -> int:
    run = Run("edit", args.out)
    config = load_config(args.config, _edit_overrides(args))
    images = [load_input_image(p) for p in args.images]
    for p in args.images:
        run.add_input(p)
    if args.config:
        run.add_input(args.config)
    masks = None
    if args.mask:
        if len(args.mask) not in (1, len(images)):
            raise ParameterError("give one --mask for all images or one per image")
        loaded = [load_input_image(p)[:, :, 0] for p in args.mask]
        for p in args.mask:
            run.add_input(p)
        masks = loaded * len(images) if len(loaded) == 1 else loaded
    run.config = config.to_flat()
    result = edit_group(images, config, masks=masks, partial=args.partial, repair=args.repair)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, im in enumerate(result.images):
        if im is not None:
            written.append(run.output(out / f"edited_{k}.{args.format}"))
            write_image(written[-1], im)
    cons = {"schema": CONSISTENCY_SCHEMA, "anchor": config.anchor_index,
            "pairs": {str(j): r.to_dict() for j, r in result.reports.items()},
            "errors": {str(j): e for j, e in result.errors.items()}}
    write_json(run.output(out / "consistency.json"), cons)
    run.timings.update({k: float(v) for k, v in result.timings.items()})
    run.extra["cache"] = {str(j): {"key": result.cache_keys[j], "hit": result.cache_hits[j]}
                          for j in result.cache_keys}
    run.extra["threads"] = args.threads
    run.finish()
    for j, r in result.reports.items():
        print(f"pair ({config.anchor_index}, {j}) consistency {r.score:.4f}")
    for j, e in result.errors.items():
        print(f"pair ({config.anchor_index}, {j}) failed: {e}")
    return EXIT_DEGRADED if result.errors else EXIT_OK


def _compare_one(seed: int, args, study: StudyConfig):
    if args.source:
        src, tgt = load_input_image(args.source), load_input_image(args.target)
        gt = load_field(args.gt)
    else:
        base = builtin_pattern("texture", args.size, 1000 + seed)
        rng = np.random.default_rng(seed)
        src = base
        tgt, gt = synth_pair(base, random_warp(rng, args.size), Jitter(1.0, 0.0, 0.01), seed=seed)
    return compare_study(src, tgt, gt, study, pair_id=f"seed{seed}" if not args.source else "pair")


def cmd_compare(args) -> int:
    run = Run("compare", args.out)
    study = StudyConfig(layers=tuple(_int_list(args.layers)), steps=tuple(_int_list(args.steps)),
                        num_steps=args.num_steps, threshold_px=args.threshold,
                        denoiser_seed=args.denoiser_seed)
    if args.source:
        if not (args.target and args.gt):
            raise ParameterError("--source needs --target and --gt")
        for p in (args.source, args.target, args.gt):
            run.add_input(p)
        seeds = [0]
    else:
        seeds = list(range(args.seed, args.seed + args.seeds))
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        reports = list(pool.map(lambda s: _compare_one(s, args, study), seeds))
    out = Path(args.out)
    for r in reports:
        for p in r.write(out / r.pair_id):
            run.output(p)
    layers = sorted(reports[0].implicit_pck)
    steps = sorted(reports[0].implicit_pck[layers[0]])
    mean_imp = {l: {s: float(np.mean([r.implicit_pck[l][s] for r in reports])) for s in steps}
                for l in layers}
    flat = [v for row in mean_imp.values() for v in row.values()]
    summary = {
        "schema": COMPARE_SUMMARY_SCHEMA, "pairs": [r.pair_id for r in reports],
        "threshold_px": args.threshold,
        "explicit_pck_mean": float(np.mean([r.explicit_pck for r in reports])),
        "implicit_pck_mean": {str(l): {str(s): v for s, v in row.items()} for l, row in mean_imp.items()},
        "implicit_max_mean": max(flat), "implicit_spread": max(flat) - min(flat),
        "explicit_spread": 0.0,
    }
    write_json(run.output(out / "summary.json"), summary)
    lines = [f"explicit mean PCK@{args.threshold:g}px {summary['explicit_pck_mean']:.3f}",
             f"implicit max mean {summary['implicit_max_mean']:.3f} "
             f"spread {summary['implicit_spread']:.3f}"]
    write_atomic(run.output(out / "summary.txt"), ("\n".join(lines) + "\n").encode())
    run.config = {"layers": list(study.layers), "steps": list(study.steps), "seeds": seeds,
                  "num_steps": study.num_steps, "threshold_px": study.threshold_px,
                  "denoiser_seed": study.denoiser_seed, "size": args.size}
    run.finish()
    print("\n".join(lines))
    return EXIT_OK


BUILTIN_MIXTURES = {
    "gaussian": {"components": [{"weight": 1.0, "mean": [0.0, 0.0], "var": 1.0}]},
    "bimodal": {
        "components": [{"weight": 0.5, "mean": [-2.0, 0.0], "var": 0.25},
                       {"weight": 0.5, "mean": [2.0, 0.0], "var": 0.25}],
        "classes": {"0": [0], "1": [1]},
    },
}


def mixture_moments(model: AnalyticScoreModel, condition) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-dimension mean and variance of the (conditioned) mixture."""
    idx, w = model.components_for(condition)
    mu = model.means[idx]
    mean = w @ mu
    second = w @ (model.variances[idx][:, None] + mu ** 2)
    return mean, second - mean ** 2


def oracle_sample(model: AnalyticScoreModel, n: int, steps: int, seed: int, condition=None,
                  scale: float = 1.0, schedule=None) -> np.ndarray:
    """DDIM with CFG on the analytic model; ``condition=None`` samples unconditionally."""
    schedule = schedule or make_schedule()
    x = np.random.default_rng(seed).standard_normal((n, model.dim))
    for t, t_prev in step_pairs(timestep_subsequence(schedule, steps)):
        eu = analytic_eps(x, t, None, model, schedule)
        if condition is None:
            eps = eu
        else:
            eps = eu + scale * (analytic_eps(x, t, condition, model, schedule) - eu)
        x = ddim_step(x, eps, t, t_prev, schedule)
    return x


def cmd_oracle(args) -> int:
    run = Run("oracle", args.out)
    if args.mixture:
        try:
            spec = json.loads(Path(args.mixture).read_text())
        except (OSError, ValueError) as exc:
            raise ParameterError(f"cannot read mixture spec {args.mixture}: {exc}") from exc
        run.add_input(args.mixture)
    else:
        spec = BUILTIN_MIXTURES[args.builtin]
    model = AnalyticScoreModel.from_dict(spec)
    cond = args.condition
    if cond is not None:
        model.components_for(cond)
    t0 = time.perf_counter()
    x = oracle_sample(model, args.samples, args.steps, args.seed, cond, args.scale)
    run.timings["sample_s"] = time.perf_counter() - t0
    target = cond if (cond is not None and args.scale == 1.0) else None
    mean, var = mixture_moments(model, target)
    d2 = ((x[:, None, :] - model.means[None]) ** 2).sum(-1)
    nearest = np.bincount(np.argmin(d2, axis=1), minlength=len(model.weights)) / len(x)
    report = {
        "schema": ORACLE_SCHEMA, "samples": args.samples, "steps": args.steps,
        "condition": cond, "scale": args.scale,
        "empirical_mean": x.mean(0).tolist(), "empirical_var": x.var(0).tolist(),
        "exact_mean": mean.tolist(), "exact_var": var.tolist(),
        "exact_moments_for": "condition" if target is not None else "unconditional mixture",
        "max_mean_error": float(np.max(np.abs(x.mean(0) - mean))),
        "nearest_component_fraction": nearest.tolist(),
    }
    out = Path(args.out)
    write_json(run.output(out / "oracle.json"), report)
    run.config = {"mixture": spec, "samples": args.samples, "steps": args.steps,
                  "seed": args.seed, "condition": cond, "scale": args.scale}
    run.finish()
    print(f"empirical mean {np.round(x.mean(0), 4).tolist()} exact {np.round(mean, 4).tolist()}")
    print(f"empirical var  {np.round(x.var(0), 4).tolist()} exact {np.round(var, 4).tolist()}")
    print(f"nearest-component fractions {np.round(nearest, 4).tolist()}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corredit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"corredit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a warped pair with ground-truth correspondence")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--image", help="base image path")
    g.add_argument("--pattern", default="texture",
                   choices=["checkerboard", "texture", "noise", "gray"])
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--warp", default="random", help=parse_warp.__doc__)
    s.add_argument("--jitter", help="gain,bias,noise_std")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=["png", "ppm"], default="png")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("extract", help="cache-first correspondence for a pair")
    e.add_argument("source")
    e.add_argument("target")
    e.add_argument("--cache-dir")
    e.add_argument("--gt", help="ground-truth .ecf mapping target to source")
    e.add_argument("--threshold", type=float, default=2.0)
    e.add_argument("--repair", action="store_true", help="recompute corrupt cache entries")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    d = sub.add_parser("edit", help="consistent editing of an image group")
    d.add_argument("images", nargs="+")
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--lambda", dest="lam", type=float)
    d.add_argument("--gamma", type=float)
    d.add_argument("--scale", type=float)
    d.add_argument("--steps", type=int)
    d.add_argument("--gate-steps", help="A:B, 1-based inclusive")
    d.add_argument("--gate-layer", type=int)
    d.add_argument("--warp-target", choices=["queries", "outputs"])
    d.add_argument("--cfg-branches", choices=["uncond", "both"])
    d.add_argument("--anchor", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--noise-mode", choices=["aligned", "shared", "independent"])
    d.add_argument("--denoiser", choices=["toy", "analytic"])
    d.add_argument("--no-guidance", action="store_true")
    d.add_argument("--mask", action="append", help="editable-region mask (white = edit)")
    d.add_argument("--cache-dir")
    d.add_argument("--partial", action="store_true", help="keep going past degraded pairs")
    d.add_argument("--repair", action="store_true")
    d.add_argument("--threads", type=int, default=1)
    d.add_argument("--format", choices=["png", "ppm"], default="png")
    d.set_defaults(func=cmd_edit)

    c = sub.add_parser("compare", help="explicit vs implicit correspondence study")
    c.add_argument("--source")
    c.add_argument("--target")
    c.add_argument("--gt")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--size", type=int, default=64)
    c.add_argument("--layers", default="1,2,4,8,10")
    c.add_argument("--steps", default="10,20,35")
    c.add_argument("--num-steps", type=int, default=50)
    c.add_argument("--threshold", type=float, default=2.0)
    c.add_argument("--denoiser-seed", type=int, default=0)
    c.add_argument("--threads", type=int, default=1)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("oracle", help="sample the analytic mixture model and report moments")
    g = o.add_mutually_exclusive_group()
    g.add_argument("--mixture", help="JSON mixture spec")
    g.add_argument("--builtin", choices=sorted(BUILTIN_MIXTURES), default="gaussian")
    o.add_argument("--steps", type=int, default=50)
    o.add_argument("--samples", type=int, default=2000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--condition")
    o.add_argument("--scale", type=float, default=1.0)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DegradedCorrespondenceError as exc:
        print(f"error: degraded correspondence: {exc}", file=sys.stderr)
        return EXIT_DEGRADED
    except IntegrityError as exc:
        print(f"error: {exc} (rerun with --repair to recompute)", file=sys.stderr)
        return EXIT_IO
    except CorrEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
