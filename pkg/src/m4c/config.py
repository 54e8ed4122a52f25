"""Model, schedule and run configuration with flat ``key = value`` files.

Defaults are the full-scale hyper-parameters of the TextVQA / ST-VQA
setting. Config files may only set known keys; flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError


@dataclass
class M4CConfig:
    d: int = 768
    L: int = 4
    heads: int = 12
    ffn_dim: int = 3072
    K: int = 20
    M: int = 100
    N: int = 50
    T: int = 12
    V: int = 5002
    dropout: float = 0.1
    enable_fixed_vocab: bool = True
    enable_ocr_copy: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ValidationError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.L < 0 or self.ffn_dim <= 0:
            raise ValidationError("L must be >= 0 and ffn_dim > 0")
        if self.T < 1:
            raise ValidationError(f"T must be >= 1, got {self.T}")
        if self.V < 2:
            raise ValidationError(f"V must be >= 2 (special tokens), got {self.V}")
        if min(self.K, self.M, self.N) < 0:
            raise ValidationError("K, M, N must be non-negative")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (self.enable_fixed_vocab or self.enable_ocr_copy):
            raise ValidationError("at least one of enable_fixed_vocab / enable_ocr_copy must be true")

    @property
    def caps(self):
        return (self.K, self.M, self.N)


@dataclass
class LrSchedule:
    base_lr: float = 1e-4
    warmup_factor: float = 0.2
    warmup_iters: int = 2000
    decay_factor: float = 0.1
    decay_steps: tuple = (14000, 19000)
    max_iters: int = 24000

    def __post_init__(self):
        self.decay_steps = tuple(int(s) for s in self.decay_steps)
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ValidationError(f"decay_steps must be strictly increasing, got {self.decay_steps}")
        if self.decay_steps and self.max_iters > 0 and self.decay_steps[-1] >= self.max_iters:
            raise ValidationError(f"decay_steps {self.decay_steps} must be < max_iters {self.max_iters}")
        if self.warmup_iters < 0 or self.max_iters < 0:
            raise ValidationError("warmup_iters and max_iters must be non-negative")


@dataclass
class RunConfig:
    """Everything a subcommand needs, fully resolved before it runs."""

    model: M4CConfig = field(default_factory=M4CConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    batch_size: int = 128
    clip_norm: float = 0.25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 1000
    log_interval: int = 100
    val_limit: int = 0

    # flat key -> (section, field name)
    @classmethod
    def keymap(cls):
        keys = {}
        for f in dataclasses.fields(M4CConfig):
            keys[f.name] = ("model", f.name, f.type)
        for f in dataclasses.fields(LrSchedule):
            keys[f.name] = ("schedule", f.name, f.type)
        for f in dataclasses.fields(cls):
            if f.name not in ("model", "schedule"):
                keys[f.name] = (None, f.name, f.type)
        return keys

    def to_flat(self):
        out = {}
        for key, (section, name, _) in self.keymap().items():
            obj = self if section is None else getattr(self, section)
            out[key] = getattr(obj, name)
        return out

    def to_text(self):
        lines = []
        for key, value in self.to_flat().items():
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides):
        """New config with ``{key: value}`` applied (values may be strings)."""
        keymap = self.keymap()
        flat = self.to_flat()
        for key, value in overrides.items():
            if key not in keymap:
                raise ValidationError(f"unknown config key {key!r}")
            flat[key] = _coerce(value, keymap[key][2], key) if isinstance(value, str) else value
        model = {}
        sched = {}
        top = {}
        for key, value in flat.items():
            section = keymap[key][0]
            (model if section == "model" else sched if section == "schedule" else top)[key] = value
        return RunConfig(model=M4CConfig(**model), schedule=LrSchedule(**sched), **top)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(text, typ, key):
    text = text.strip()
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "tuple":
            return tuple(int(p) for p in text.replace(",", " ").split())
    except ValueError as exc:
        raise ValidationError(f"bad value for {key!r}: {text!r}") from exc
    return text


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict of strings."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", line_no)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line_no)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", line_no)
        out[key] = value
    return out


def load_run_config(path=None, overrides=None):
    """Defaults, then the config file, then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


ABLATIONS = {
    "none": {"enable_fixed_vocab": True, "enable_ocr_copy": True},
    "no-vocab": {"enable_fixed_vocab": False, "enable_ocr_copy": True},
    "no-copy": {"enable_fixed_vocab": True, "enable_ocr_copy": False},
}
