"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

ENV_PREFIX = "MFS_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # sequence and agents
    F: int = 120
    N_train: int = 5
    N_test: int = 25
    M: int = 1
    delta: int = 1
    T_max: int = 10
    # objective
    gamma: float = 0.9
    lambda1: float = 1.0
    lambda2: float = 1.0
    K: int = 1
    aux_step_cls: bool = False
    # optimisation
    lr: float = 1e-4
    clip_norm: float = 5.0
    batch_videos: int = 1
    epochs: int = 30
    eval_interval: int = 1
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-4
    pretrain_segments: int = 0  # 0 pools every frame
    # network sizes; C = D = 0 means "take from the training data"
    d_o: int = 128
    H: int = 1024
    C: int = 0
    D: int = 0
    seed: int = 0
    train_path: str = ""
    val_path: str = ""
    out_dir: str = "runs"

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.F >= 1, "F must be >= 1"),
            (self.N_train >= 1 and self.N_test >= 1, "N_train and N_test must be >= 1"),
            (self.M >= 0, "M must be >= 0"),
            (self.delta >= 1, "delta must be >= 1"),
            (self.T_max >= 1, "T_max must be >= 1"),
            (0 < self.gamma <= 1, "gamma must lie in (0, 1]"),
            (self.lambda1 >= 0 and self.lambda2 >= 0, "lambda1 and lambda2 must be >= 0"),
            (self.K >= 1, "K must be >= 1"),
            (self.lr > 0 and self.pretrain_lr > 0, "learning rates must be > 0"),
            (self.clip_norm >= 0, "clip_norm must be >= 0 (0 disables clipping)"),
            (self.batch_videos >= 1, "batch_videos must be >= 1"),
            (self.epochs >= 0 and self.pretrain_epochs >= 0, "epoch counts must be >= 0"),
            (self.pretrain_segments >= 0, "pretrain_segments must be >= 0"),
            (self.eval_interval >= 1, "eval_interval must be >= 1"),
            (self.d_o >= 1 and self.H >= 1, "d_o and H must be >= 1"),
            (self.C >= 0 and self.D >= 0, "C and D must be >= 0"),
            (self.seed >= 0, "seed must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def serialize(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> bytes:
        return hashlib.sha256(self.serialize().encode("utf-8")).digest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw).validate()


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_kv(text: str, known: dict, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines (``#`` comments) against ``known`` keys.

    Returns raw string values; errors carry the line number.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (lineno, value.strip())
    return out


def parse_config(text: str, source: str = "<config>", env: dict | None = None) -> ExperimentConfig:
    """Parse config text; ``MFS_<KEY>`` variables in ``env`` override file values."""
    raw = parse_kv(text, _FIELDS, source)
    values = {}
    for key, (lineno, value) in raw.items():
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    for var, value in (env or {}).items():
        if not var.startswith(ENV_PREFIX):
            continue
        key = var[len(ENV_PREFIX):]
        match = next((k for k in _FIELDS if k.lower() == key.lower()), None)
        if match is None:
            raise ConfigError(f"environment variable {var} names unknown key {key!r}")
        try:
            values[match] = _coerce(match, value)
        except ValueError as exc:
            raise ConfigError(f"{var}: bad value: {exc}") from None
    return ExperimentConfig(**values).validate()


def load_config(path: str | Path, use_env: bool = True) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path), os.environ if use_env else None)
