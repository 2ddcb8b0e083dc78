"""Flat ``key = value`` run configuration.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Unknown keys and malformed values are errors. Every :class:`EditConfig`
field is accepted under its own name, except ``t_range``, which is split
into ``t_min`` and ``t_max``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from ..distill import T_RANGE
from ..engine import EditConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


@dataclass
class RunConfig:
    # inputs; empty paths select the built-in standard scene / shipped model
    video: str = ""
    mask: str = ""
    object_mask: str = ""
    params: str = ""
    source: str = "red square"
    target: str = "blue square"
    out: str = "out"
    # edit loop
    steps: int = 200
    lr: float = 0.4
    w: float = 9.0
    lambda_s: float = EditConfig.lambda_s
    lambda_t: float = EditConfig.lambda_t
    t_min: float = T_RANGE[0]
    t_max: float = T_RANGE[1]
    seed: int = 0
    mask_vdds: bool = True
    share_eps: bool = True
    mask_ssm: bool = EditConfig.mask_ssm
    grad_weight: float = 1.0
    key_caption: str = ""
    # cascade
    spatial: int = 2
    temporal: int = 2
    # ablation
    seeds: int = 5
    # training
    train_steps: int = 3000
    train_count: int = 1000
    train_lr: float = 3e-3
    train_seed: int = 0
    # sampling
    caption: str = "red square"
    sample_w: float = 3.0
    sample_noise: str = "beta_tilde"
    frames: int = 8
    height: int = 32
    width: int = 32

    def edit_config(self, **overrides) -> EditConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(EditConfig) if f.name != "t_range"}
        kw["t_range"] = (self.t_min, self.t_max)
        kw.update(overrides)
        return EditConfig(**kw)


_TYPES = {f.name: f.type for f in fields(RunConfig)}
# keep the EditConfig defaults and the run-file defaults from drifting apart
assert all(
    f.name in _TYPES or f.name == "t_range" for f in fields(EditConfig)
), "RunConfig is missing an EditConfig field"


def _convert(key: str, raw: str) -> Any:
    kind = _TYPES[key]
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    seen: set[str] = set()
    for num, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", num)
        key, raw = (p.strip() for p in body.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}", num)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", num)
        seen.add(key)
        try:
            setattr(cfg, key, _convert(key, raw))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", num) from None
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    for key, raw in pairs.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        try:
            setattr(cfg, key, _convert(key, raw))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    out = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"

