"""Run configuration: a flat key=value file plus CLI flag overrides.

Every key below is a documented config key; unknown keys are rejected with
the offending name. Flags override file values, which override defaults.
The seed is mandatory — it is the only nondeterminism knob.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid or missing configuration value; message names the field."""


@dataclass
class RunConfig:
    # run identity
    seed: int | None = None
    data_dir: str = ""
    out_dir: str = "run"
    task: str = ""
    # model dimensions
    width: int = 128
    heads: int = 4
    vision_layers: int = 2
    text_layers: int = 2
    n_f1: int = 2
    n_f2: int = 1
    use_glu: bool = True
    ffn_mult: int = 2
    image_size: int = 64
    patch_size: int = 16
    max_text_len: int = 20
    threshold: float = 0.5
    # optimization: linear warmup to the peak, cosine decay to the floor
    steps: int = 1500
    batch_size: int = 32
    lr_init: float = 1e-5
    lr_peak: float = 8e-4
    lr_final: float = 1e-5
    warmup_frac: float = 0.06
    weight_decay: float = 0.01
    mask_ratio: float = 0.25
    limit_train: int = 0      # >0 restricts training to the first N samples
    log_every: int = 50
    ckpt_every: int = 0       # 0 = final checkpoint only
    # evaluation / inference
    split: str = "test"
    max_decode_len: int = 12
    checkpoint: str = ""

    def model_dict(self, vocab_size: int) -> dict:
        return {
            "vocab_size": vocab_size,
            "width": self.width,
            "heads": self.heads,
            "vision_layers": self.vision_layers,
            "text_layers": self.text_layers,
            "fusion": {"n_f1": self.n_f1, "n_f2": self.n_f2,
                       "use_glu": self.use_glu, "rec_memory": "image"},
            "ffn_mult": self.ffn_mult,
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "max_text_len": self.max_text_len,
            "threshold": self.threshold,
        }


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = {name: (int if name == "seed" else hint)
          for name, hint in typing.get_type_hints(RunConfig).items()}


def _coerce(name: str, raw: str):
    base = _TYPES[name]
    text = raw.strip()
    if base is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key '{name}': expected a boolean, got {raw!r}")
    try:
        return base(text)
    except ValueError:
        raise ConfigError(
            f"config key '{name}': expected {base.__name__}, got {raw!r}") from None


def parse_config_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{line_no}: unknown config key '{key}'")
            values[key] = _coerce(key, raw)
    return values


def build_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    if file_path:
        values.update(parse_config_file(file_path))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    return RunConfig(**values)


def validate(cfg: RunConfig, need_data: bool = True, need_checkpoint: bool = False):
    if cfg.seed is None:
        raise ConfigError("config key 'seed' is mandatory")
    if need_data:
        if not cfg.data_dir:
            raise ConfigError("config key 'data_dir' is mandatory for this task")
        if not os.path.isdir(cfg.data_dir):
            raise ConfigError(f"config key 'data_dir': no such directory {cfg.data_dir!r}")
    if need_checkpoint:
        if not cfg.checkpoint:
            raise ConfigError("config key 'checkpoint' is mandatory for this task")
        if not os.path.exists(cfg.checkpoint):
            raise ConfigError(f"config key 'checkpoint': no such file {cfg.checkpoint!r}")
    if not 0.0 < cfg.mask_ratio <= 1.0:
        raise ConfigError(f"config key 'mask_ratio': {cfg.mask_ratio} outside (0, 1]")
    if cfg.batch_size < 1 or cfg.steps < 1:
        raise ConfigError("config keys 'batch_size' and 'steps' must be positive")
    return cfg
