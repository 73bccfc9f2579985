"""Flat ``key = value`` run configuration with ``--key value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, unparsable value or missing required setting."""


@dataclass
class RunConfig:
    dataset: str = ""
    out: str = "run"
    optimizer: str = "3dgs2tr"
    iterations: int = 2000            # T, sets the eps and position-lr horizons
    stop_after: int = 0               # stop early after this many steps (0: run all T)
    lam: float = 0.2
    eps_start: float = 1e-6
    eps_end: float = 1e-8
    batch_grad: int = 1
    batch_hutch: int = 1
    nu: int = 1
    interval: int = 10
    theta1: float = 0.9
    theta2: float = 0.999
    cap_mean: float = 1.0
    cap_scale: float = 1.0
    cap_rotation: float = 0.25
    cap_opacity: float = 1.0
    cap_color: float = 1.0
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    seed: int = 0
    eval_every: int = 100
    preview_every: int = 500
    checkpoint_every: int = 500
    workers: int = 1
    log_wall_time: bool = False
    # dataset generation
    k_gt: int = 64
    k_init: int = 96
    num_views: int = 25
    holdout_every: int = 5
    width: int = 64
    height: int = 64
    sigma_init: float = 0.05

    def validate(self) -> "RunConfig":
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.stop_after < 0:
            raise ConfigError("stop_after must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if min(self.eval_every, self.preview_every, self.checkpoint_every) < 1:
            raise ConfigError("cadences must be >= 1")
        return self

    @property
    def steps(self) -> int:
        return min(self.stop_after, self.iterations) if self.stop_after else self.iterations


def _coerce(field: dataclasses.Field, raw: str):
    kind = type(field.default)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{field.name}: expected {kind.__name__}, got {raw!r}") from None


def _fields(cls=None):
    return {f.name: f for f in dataclasses.fields(cls or RunConfig)
            if type(f.default) in (int, float, str, bool)}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def parse_overrides(args: list[str]) -> dict[str, str]:
    """``['--key', 'value', '--flag=v']`` to a dict."""
    out, i = {}, 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for {tok}")
            key, val = tok[2:], args[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def build_config(config_path: str | None = None, overrides: dict[str, str] | None = None,
                 cls=None, **defaults):
    """Defaults, then the file, then overrides (later wins).

    ``cls`` selects another flat dataclass (default :class:`RunConfig`);
    only its scalar fields are settable.
    """
    cls = cls or RunConfig
    fields = _fields(cls)
    cfg = cls(**defaults)
    merged = {}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        merged.update(parse_config_text(p.read_text(), str(p)))
    merged.update(overrides or {})
    for key, raw in merged.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(fields[key], raw))
    return cfg.validate() if hasattr(cfg, "validate") else cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))
