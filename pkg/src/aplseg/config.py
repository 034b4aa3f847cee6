"""Experiment configuration: a flat, typed `key = value` text format.

Every knob of a run (model geometry, prompt learning, optimizer,
schedule, ablation switches, seed, optional data paths) lives in one
RunConfig. The serialized text round-trips exactly and is embedded in
checkpoints, so a trained model always knows how it was built.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .encoder import EncoderConfig
from .errors import ConfigError
from .prompts import APLConfig


@dataclass(frozen=True)
class RunConfig:
    # model geometry
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 12
    num_heads: int = 4
    adapter_dim: int = 16
    hfc_ratio: float = 0.25
    # prompt learning
    a_sp: int = 100
    n_max: int = 7
    omega: float = 10.0
    iterations: int = 10
    n_tokens: int = 4
    # optimizer and schedule
    lr: float = 5e-5
    weight_decay: float = 0.01
    epochs: int = 50
    episodes_per_epoch: int = 64
    alpha: float | None = None   # None: per-episode class balance
    beta: float | None = None
    # ablation switches
    prompt_strategy: str = "apl"           # apl | nope | one_prototype | point_prompt
    decoder: str = "mlmd"                  # mlmd | single_level
    # bookkeeping
    seed: int = 0
    data: str = ""    # informational; CLI flags take precedence
    split: str = ""

    def __post_init__(self):
        if self.prompt_strategy not in ("apl", "nope", "one_prototype", "point_prompt"):
            raise ConfigError(f"unknown prompt_strategy {self.prompt_strategy!r}")
        if self.decoder not in ("mlmd", "single_level"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ConfigError("epochs and episodes_per_epoch must be positive")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        self.encoder_config()  # geometry validation
        self.apl_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(image_size=self.image_size, patch_size=self.patch_size,
                             embed_dim=self.embed_dim, num_layers=self.num_layers,
                             num_heads=self.num_heads, adapter_dim=self.adapter_dim,
                             hfc_ratio=self.hfc_ratio)

    def apl_config(self) -> APLConfig:
        return APLConfig(a_sp=self.a_sp, n_max=self.n_max, omega=self.omega,
                         iterations=self.iterations, n_tokens=self.n_tokens)

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if val is None else val}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str, lineno: int):
    ftype = _FIELD_TYPES[name]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "float | None":
            return None if raw.lower() == "none" else float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config line {lineno}: bad value {raw!r} for {name}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; unknown keys and bad values name their line."""
    values = {}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {rawline!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, lineno)
    return RunConfig(**values)
