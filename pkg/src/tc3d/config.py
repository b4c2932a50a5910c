"""Run configuration shared by every CLI command.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Tuples are written comma-separated (``milestones = 0.4, 0.75``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


@dataclass(frozen=True)
class RunConfig:
    # dataset
    data: str = "data"
    classes: int = 4
    train_per_class: int = 50
    test_per_class: int = 20
    frames: int = 48
    size: int = 16
    data_seed: int = 7
    # sampling
    S: int = 3
    k: int = 8
    o: int = 2
    strategy: str = "consecutive"
    # network and training
    seed: int = 0
    channels: tuple = (8, 16, 32, 32)
    dropout: float = 0.0        # 0.8 stalls a 32-feature head
    residual: bool = False
    agg: str = "average"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.005
    momentum: float = 0.9
    milestones: tuple = (0.5, 0.8)
    # compression
    sparse_conv: float = 0.85
    sparse_fc: float = 0.90
    prune_conv: float = 0.90
    prune_fc: float = 0.95
    sparsity_step: float = 0.1
    sparse_epochs: int = 10
    dense_epochs: int = 10
    prune_epochs: int = 20
    dsd_lr: float = 0.005
    fine_tune_factor: float = 0.1
    conv_bits: int = 8
    fc_bits: int = 5
    finetune_epochs: int = 2
    finetune_lr: float = 1e-4
    stages: tuple = ("dsd", "prune", "quantize", "huffman")
    # evaluation and benchmarking
    eval_mode: str = "s-clips"
    bench_reps: int = 10
    threads: int = 1

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_value(key, text):
    """Convert ``text`` to the type of ``RunConfig.<key>``."""
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _BOOL[text.lower()]
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
        return type(default)(text)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_lines(lines):
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load(path=None, overrides=None, base=RunConfig()):
    """Defaults, then the file at ``path``, then ``overrides`` (already typed)."""
    values = parse_lines(Path(path).read_text().splitlines()) if path else {}
    values.update(overrides or {})
    return base.replace(**values)


def dump(cfg):
    """Config-file text that reproduces ``cfg``."""
    lines = []
    for key, value in cfg.as_dict().items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
