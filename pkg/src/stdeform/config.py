"""Model configuration: flat key=value files plus built-in presets.

Unknown keys are rejected so typos never silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

INIT_MODES = ("pattern", "random")
ACTIVATIONS = ("gelu", "tanh", "relu")
NORM_PLACEMENTS = ("post", "pre")


@dataclass(frozen=True)
class ModelConfig:
    t: int = 2
    h: int = 3
    w: int = 3
    c: int = 24
    heads: int = 2
    points: int = 4
    layers_enc: int = 2
    layers_dec: int = 2
    num_queries: int = 4
    seed: int = 7
    init: str = "pattern"
    ffn_hidden: int = 0          # 0 means 4*c
    activation: str = "gelu"
    norm_placement: str = "post"
    pos_every_layer: bool = True

    def __post_init__(self):
        for name in ("t", "h", "w", "c", "heads", "points", "layers_enc",
                     "layers_dec", "num_queries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"config key '{name}' must be >= 1, got {getattr(self, name)}")
        if self.c % self.heads != 0:
            raise ConfigError(f"c={self.c} must be divisible by heads={self.heads}")
        if self.c % 3 != 0 or (self.c // 3) % 2 != 0:
            raise ConfigError(
                f"c={self.c} must be divisible by 3 with an even c/3 for positional encoding"
            )
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ConfigError(
                f"norm_placement must be one of {NORM_PLACEMENTS}, got {self.norm_placement!r}"
            )
        if self.ffn_hidden < 0:
            raise ConfigError(f"ffn_hidden must be >= 0, got {self.ffn_hidden}")

    @property
    def hidden_width(self) -> int:
        return self.ffn_hidden if self.ffn_hidden else 4 * self.c

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Desk-scale default and the full-width module preset (M=8, K=32, C=384 on a
# tiny grid so it stays runnable on a laptop).
PRESETS = {
    "desk": ModelConfig(),
    "full": ModelConfig(t=1, h=2, w=2, c=384, heads=8, points=32,
                        layers_enc=1, layers_dec=1, num_queries=2),
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_value(name: str, raw: str, kind):
    if kind is bool:
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ConfigError(f"config key '{name}' expects a boolean, got {raw!r}") from None
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key '{name}' expects an integer, got {raw!r}") from None
    return raw


def parse_raw(text: str) -> dict:
    """Parse key=value lines (# starts a comment) into typed override values."""
    known = {f.name for f in fields(ModelConfig)}
    kinds = {"init": str, "activation": str, "norm_placement": str, "pos_every_layer": bool}
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        name, raw = (part.strip() for part in line.split("=", 1))
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown config key {name!r}")
        if name in overrides:
            raise ConfigError(f"line {lineno}: duplicate config key {name!r}")
        overrides[name] = _parse_value(name, raw, kinds.get(name, int))
    return overrides


def parse_model_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Apply key=value overrides from `text` on top of a base config."""
    return replace(base or ModelConfig(), **parse_raw(text))


def load_model_config(path: str | Path, base: ModelConfig | None = None) -> ModelConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_model_config(path.read_text(), base=base)
