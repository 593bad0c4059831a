import pytest

from corredit.attn import GateConfig
from corredit.config import EditConfig, dump_config, load_config, parse_config_text
from corredit.errors import ConfigError


def test_defaults_follow_published_settings():
    c = EditConfig()
    assert c.num_steps == 50
    assert (c.gate.step_lo, c.gate.step_hi, c.gate.layer_threshold) == (4, 40, 8)
    assert (c.cfg.lam, c.cfg.gamma) == (0.8, 0.9)


def test_flat_round_trip():
    c = EditConfig()
    assert EditConfig.from_flat(c.to_flat()) == c
    assert EditConfig.from_flat({k: str(v) for k, v in c.to_flat().items()}) == c


def test_dump_load_round_trip(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nlambda = 0.5\n\ngate_steps = 2:30  # inline\n")
    c = load_config(p, {"gamma": "0.7"})
    assert (c.cfg.lam, c.cfg.gamma, c.gate.step_lo, c.gate.step_hi) == (0.5, 0.7, 2, 30)
    p.write_text(dump_config(c))
    assert load_config(p) == c


def test_overrides_win(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("lambda = 0.5\n")
    assert load_config(p, {"lambda": 0.1}).cfg.lam == 0.1


@pytest.mark.parametrize("values", [
    {"nope": 1}, {"lambda": "abc"}, {"gate_steps": "5"}, {"gate_enabled": "maybe"},
    {"num_steps": 20}, {"noise_mode": "odd"}, {"valid_floor": 2}, {"warp_target": "keys"},
])
def test_bad_values(values):
    with pytest.raises(ConfigError):
        EditConfig.from_flat(values)


def test_parse_rejects_garbage_line():
    with pytest.raises(ConfigError):
        parse_config_text("lambda 0.3")


def test_without_guidance():
    c = EditConfig().without_guidance()
    assert not c.gate.enabled and c.cfg.lam == 0.0


def test_gate_steps_within_schedule():
    with pytest.raises(ConfigError):
        EditConfig(num_steps=10, gate=GateConfig(4, 40, 8))
