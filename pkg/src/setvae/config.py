"""Training configuration and the flat key=value config file format.

Files are plain text: one `key = value` per line, `#` starts a comment,
blank lines ignored. Unknown keys are errors so typos fail loudly.
Integer lists (enc_m, gen_m) are comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .attention import ConfigError
from .model import ModelConfig


@dataclass
class TrainConfig:
    # architecture
    d: int = 64
    d_z: int = 16
    heads: int = 4
    enc_m: tuple = (32, 16, 8, 4, 2)
    gen_m: tuple = (2, 4, 8, 16, 32)
    d0: int = 32
    K: int = 4
    out_dim: int = 2
    out_activation: str = "tanh01"
    # objective
    beta_max: float = 0.01
    anneal_steps: int = 1000
    # optimization
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 10
    steps: int = 0  # total optimizer steps; 0 means run the full epochs
    batch_size: int = 16
    seed: int = 0
    lr_decay_start: float = 0.5
    grad_clip: float = 5.0
    ckpt_interval: int = 500
    dtype: str = "f32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if self.epochs < 1 and self.steps < 1:
            raise ConfigError("either epochs or steps must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (0.0 <= self.lr_decay_start <= 1.0):
            raise ConfigError("lr_decay_start must lie in [0, 1]")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be nonnegative")
        if self.ckpt_interval < 1:
            raise ConfigError("ckpt_interval must be positive")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got '{self.dtype}'")
        self.model_config()  # architecture invariants

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d, d_z=self.d_z, heads=self.heads,
            enc_m=self.enc_m, gen_m=self.gen_m, d0=self.d0, K=self.K,
            out_dim=self.out_dim, out_activation=self.out_activation,
            beta_max=self.beta_max, anneal_steps=self.anneal_steps,
        )

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def _convert(key: str, raw: str, target_type):
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw
    if target_type is tuple:
        return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
    raise ConfigError(f"unsupported config field type for '{key}'")


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    known = {f.name: f.type for f in fields(TrainConfig)}
    typemap = {"int": int, "float": float, "str": str, "tuple": tuple}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        try:
            values[key] = _convert(key, raw, typemap[known[key]])
        except ValueError:
            raise ConfigError(
                f"{source}:{lineno}: bad value '{raw}' for '{key}'"
            ) from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), source=str(path))
