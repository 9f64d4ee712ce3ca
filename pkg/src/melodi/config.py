"""Model configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

POLICIES = ("melodi", "xl", "memorizing", "none")


class ConfigError(ValueError):
    """Raised with one line per violated invariant."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class ModelConfig:
    n_layers: int = 13
    long_term_layer_positions: list[int] = field(default_factory=lambda: [8])
    # None means every layer keeps short-term memory.
    short_term_enabled_layers: list[int] | None = None
    dim: int = 1024
    heads: int = 8
    ffn_hidden: int = 4096
    window_len: int = 512
    short_tokens: int = 128
    long_tokens: int = 64
    q_max: int = 128
    vocab_size: int = 32000
    memory_policy: str = "melodi"
    branching: bool = True
    copy_short_as_long: bool = False
    detach_long_kv: bool = False  # True: stored KV never carries gradient (mix_long then gets none)
    rel_max_offset: int = 0  # 0: window_len + short_tokens
    init_seed: int = 0

    @property
    def short_layers(self) -> list[int]:
        if self.short_term_enabled_layers is None:
            return list(range(self.n_layers))
        return sorted(self.short_term_enabled_layers)

    @property
    def summary_tokens(self) -> int:
        return self.short_tokens if self.memory_policy == "melodi" else 0

    def problems(self) -> list[str]:
        p = []
        for name in ("n_layers", "dim", "heads", "ffn_hidden", "window_len", "vocab_size", "q_max"):
            if getattr(self, name) < 1:
                p.append(f"{name} must be >= 1")
        if self.short_tokens < 0 or self.long_tokens < 0:
            p.append("short_tokens and long_tokens must be >= 0")
        if self.heads >= 1 and self.dim % self.heads:
            p.append(f"dim ({self.dim}) must be divisible by heads ({self.heads})")
        if self.memory_policy not in POLICIES:
            p.append(f"memory_policy must be one of {', '.join(POLICIES)}")
        for pos in self.long_term_layer_positions:
            if not 0 <= pos < self.n_layers:
                p.append(f"long_term_layer_positions: {pos} outside [0, {self.n_layers})")
        if len(set(self.long_term_layer_positions)) != len(self.long_term_layer_positions):
            p.append("long_term_layer_positions has duplicates")
        for pos in self.short_term_enabled_layers or []:
            if not 0 <= pos < self.n_layers:
                p.append(f"short_term_enabled_layers: {pos} outside [0, {self.n_layers})")
        if self.memory_policy == "melodi" and self.long_term_layer_positions:
            if self.copy_short_as_long:
                if self.long_tokens != self.short_tokens:
                    p.append("copy_short_as_long requires L == S (long_tokens == short_tokens)")
            elif not self.long_tokens < self.short_tokens:
                p.append(f"L < S violated: long_tokens ({self.long_tokens}) must be less than "
                         f"short_tokens ({self.short_tokens})")
            if self.long_tokens < 1:
                p.append("long_tokens must be >= 1 with a long-term layer")
        if self.memory_policy == "memorizing" and len(self.long_term_layer_positions) != 1:
            p.append("memorizing policy needs exactly one long_term_layer_positions entry")
        if self.rel_max_offset < 0:
            p.append("rel_max_offset must be >= 0")
        return p

    def validate(self) -> "ModelConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    # -- text format --------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_fields(cls, text)).validate()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _format(v) -> str:
    if v is None:
        return "all"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(value: str, f: dataclasses.Field, name: str):
    kind = str(f.type)
    value = value.strip()
    if kind.startswith("list[int]"):
        if value == "all" and "None" in kind:
            return None
        if value == "":
            return []
        return [int(x) for x in value.split(",")]
    if kind == "bool":
        if value.lower() in ("true", "1", "yes", "on"):
            return True
        if value.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def parse_fields(cls, text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into dataclass kwargs."""
    known = {f.name: f for f in fields(cls)}
    out, problems = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            problems.append(f"line {lineno}: unknown field {key!r}")
            continue
        try:
            out[key] = _parse(value, known[key], key)
        except ValueError as exc:
            problems.append(f"line {lineno}: {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return out


def validate_config(text: str) -> ModelConfig:
    return ModelConfig.from_text(text)


def full_scale_config(**overrides) -> ModelConfig:
    """The 13-layer S128+L64 configuration used for the main comparisons."""
    return ModelConfig(**overrides).validate()
