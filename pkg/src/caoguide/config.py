"""Flat ``key = value`` pipeline configuration.

Lines are ``key = value``; ``#`` starts a comment. Keys may use hyphens or
underscores. Unknown keys and out-of-range values raise `ConfigError`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, MissingFile


@dataclass(frozen=True)
class PipelineConfig:
    block: int = 11
    c: float = 2.0
    eps_c: float | None = None     # None: 1% of the dense cloud's bounding-box diagonal
    tau: int = 60
    clearance: float = 1.0
    depth_increment: float = 4.0
    step_ds: float = 0.5
    margin_mm: float = 2.0
    n_passes_max: int = 50
    background_votes: bool = True
    advance_mode: str = "lateral"

    def validate(self) -> "PipelineConfig":
        if self.block < 3 or self.block % 2 == 0:
            raise ConfigError(f"block must be an odd integer >= 3, got {self.block}")
        if self.eps_c is not None and not self.eps_c > 0:
            raise ConfigError("eps_c must be positive")
        if not 0 <= self.tau <= 256:
            raise ConfigError("tau must lie in [0, 256]")
        if self.clearance < 0 or self.depth_increment <= 0 or self.step_ds <= 0 or self.margin_mm < 0:
            raise ConfigError("clearance, margin_mm >= 0 and depth_increment, step_ds > 0 required")
        if self.n_passes_max < 1:
            raise ConfigError("n_passes_max must be >= 1")
        if self.advance_mode not in ("lateral", "deepen"):
            raise ConfigError(f"advance_mode must be lateral or deepen, got {self.advance_mode!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def merged(self, overrides: dict) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None}).validate()


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if "bool" in kind:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "None" in kind and raw.lower() in ("none", "auto", ""):
            return None
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> PipelineConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return PipelineConfig(**values).validate()


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise MissingFile(str(p))
    return parse_config(p.read_text(encoding="utf-8"))


def dump_config(cfg: PipelineConfig) -> str:
    lines = ["# pipeline configuration"]
    for k, v in cfg.to_dict().items():
        lines.append(f"{k.replace('_', '-')} = {'auto' if v is None else v}")
    return "\n".join(lines) + "\n"
