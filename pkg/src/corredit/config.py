"""Run configuration: a flat ``key = value`` file mapped onto :class:`EditConfig`."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .attn import GateConfig
from .errors import ConfigError
from .guidance import CfgConfig

DENOISER_KINDS = ("toy", "analytic")
CORR_SOURCES = ("cache", "compute")
NOISE_MODES = ("aligned", "shared", "independent")


@dataclass(frozen=True)
class EditConfig:
    num_steps: int = 50
    gate: GateConfig = field(default_factory=GateConfig)
    cfg: CfgConfig = field(default_factory=CfgConfig)
    anchor_index: int = 0
    seed: int = 0
    condition: int = 1
    denoiser: str = "toy"
    denoiser_seed: int = 0
    noise_mode: str = "aligned"
    corr_source: str = "cache"
    cache_dir: str | None = None
    valid_floor: float = 0.05
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    latent_size: int = 16

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.gate.step_lo < 1 or self.gate.step_hi > self.num_steps:
            raise ConfigError(
                f"gate steps {self.gate.step_lo}:{self.gate.step_hi} fall outside 1..{self.num_steps}")
        if self.anchor_index < 0:
            raise ConfigError("anchor_index must be >= 0")
        if self.denoiser not in DENOISER_KINDS:
            raise ConfigError(f"denoiser must be one of {DENOISER_KINDS}")
        if self.corr_source not in CORR_SOURCES:
            raise ConfigError(f"corr_source must be one of {CORR_SOURCES}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}")
        if not 0.0 <= self.valid_floor <= 1.0:
            raise ConfigError("valid_floor must lie in [0, 1]")

    def without_guidance(self) -> "EditConfig":
        """Same run with Corr-Attention and Corr-CFG both switched off."""
        return replace(self, gate=replace(self.gate, enabled=False), cfg=replace(self.cfg, lam=0.0))

    def to_flat(self) -> dict:
        g, c = self.gate, self.cfg
        out = {k: v for k, v in asdict(self).items() if k not in ("gate", "cfg")}
        out.update({
            "gate_steps": f"{g.step_lo}:{g.step_hi}", "gate_layer": g.layer_threshold,
            "gate_enabled": g.enabled, "warp_target": g.warp_target,
            "scale": c.scale, "lambda": c.lam, "gamma": c.gamma,
            "cfg_branches": c.branch_mode, "cfg_seed": c.rng_seed,
            "fixed_subset": c.fixed_subset, "same_position": c.same_position,
        })
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "EditConfig":
        """Build from string or typed values keyed as in :meth:`to_flat`."""
        base = cls().to_flat()
        unknown = set(values) - set(base)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {**base, **values}
        try:
            lo, hi = (int(v) for v in str(merged["gate_steps"]).split(":"))
            gate = GateConfig(lo, hi, int(merged["gate_layer"]), str(merged["warp_target"]),
                              _as_bool(merged["gate_enabled"]))
            cfg = CfgConfig(float(merged["scale"]), float(merged["lambda"]), float(merged["gamma"]),
                            str(merged["cfg_branches"]), int(merged["cfg_seed"]),
                            _as_bool(merged["fixed_subset"]), _as_bool(merged["same_position"]))
            cache_dir = merged["cache_dir"]
            return cls(
                num_steps=int(merged["num_steps"]), gate=gate, cfg=cfg,
                anchor_index=int(merged["anchor_index"]), seed=int(merged["seed"]),
                condition=int(merged["condition"]), denoiser=str(merged["denoiser"]),
                denoiser_seed=int(merged["denoiser_seed"]),
                noise_mode=str(merged["noise_mode"]),
                corr_source=str(merged["corr_source"]),
                cache_dir=None if cache_dir in (None, "", "None", "none") else str(cache_dir),
                valid_floor=float(merged["valid_floor"]),
                num_train_steps=int(merged["num_train_steps"]),
                beta_start=float(merged["beta_start"]), beta_end=float(merged["beta_end"]),
                latent_size=int(merged["latent_size"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from exc


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path: str | Path | None, overrides: dict | None = None) -> EditConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return EditConfig.from_flat(values)


def dump_config(config: EditConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_flat().items())
