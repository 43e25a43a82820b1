"""Flat ``key = value`` run configuration.

Lines look like ``epochs = 200``; ``#`` starts a comment.  Command-line
overrides are applied on top and always win.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from molkd.distill import DistillConfig
from molkd.errors import ConfigError
from molkd.pretrain import PretrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # pre-training
    margin: float = 6.0
    alpha: float = 2.0
    batch_size: int = 32
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dim: int = 64
    hidden_dim: int = 64
    arch: str = "TAG"
    n_layers: int = 2
    hops: int = 3
    seed: int = 0
    # fine-tuning
    tau: float = 0.1
    beta: float = 0.5
    task: str = "classification"
    head_dim: int = 64
    use_kd: bool = True
    init_from_teacher: bool = False
    # files
    reactions: str = ""
    data: str = ""
    teacher: str = ""
    split_train: str = ""
    split_valid: str = ""
    split_test: str = ""
    out: str = ""
    log: str = ""
    report: str = ""
    threads: int = 0

    def pretrain_config(self) -> PretrainConfig:
        names = {f.name for f in fields(PretrainConfig)}
        return PretrainConfig(**{k: v for k, v in asdict(self).items() if k in names}).validate()

    def distill_config(self) -> DistillConfig:
        names = {f.name for f in fields(DistillConfig)}
        return DistillConfig(**{k: v for k, v in asdict(self).items() if k in names}).validate()

    def echo(self) -> dict:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            value = int(raw)
            if key == "seed" and not 0 <= value < 2 ** 64:
                raise ValueError("seed must fit in 64 unsigned bits")
            return value
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    return raw


def parse_pairs(lines, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(str(p))
        values.update(parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())
