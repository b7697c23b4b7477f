"""Flat key = value run configuration with a fixed schema.

Files contain ``key = value`` lines ('#' comments allowed); unknown keys are
rejected, every key has a typed default, and ``--set key=value`` overrides
are applied after the file. The canonical dump (sorted keys, repr values)
feeds the config hash recorded in run manifests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .sdf import PART_COUNTS


class ConfigError(RuntimeError):
    """Invalid configuration file, key, value, or combination."""


@dataclass
class RunConfig:
    # corpus
    category: str = "table"
    corpus_size: int = 4
    corpus_seed: int = 40
    dense_points: int = 20000
    cloud_points: int = 512
    # octree depths
    depth_start: int = 4
    depth_coarse: int = 6
    depth_fine: int = 8
    # network widths
    latent_width: int = 8
    part_feature_width: int = 64
    encoder_hidden: int = 128
    attention_dk: int = 16
    fine_blocks: int = 4
    fine_width: int = 32
    unet_width: int = 16
    timestep_dim: int = 32
    decoder_hidden: int = 64
    # diffusion schedule
    schedule_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    restart_step: int = 25
    # conditioning toggles
    cross_attention_scale1: bool = True
    cross_attention_scale2: bool = True
    # training
    steps_latent: int = 600
    steps_scale1: int = 1200
    steps_scale2: int = 1200
    batch_size: int = 1
    learning_rate: float = 2e-3
    latent_learning_rate: float = 1e-2
    sdf_clamp: float = 0.25
    latent_reg: float = 1e-3
    queries_per_step: int = 4096
    checkpoint_every: int = 250
    train_seed: int = 0
    init_seed: int = 0
    # outputs and evaluation
    mesh_resolution: int = 96
    eval_resolution: int = 64
    eval_points: int = 512
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.category not in PART_COUNTS:
            raise ConfigError(f"unknown category {self.category!r}")
        for name in ("depth_start", "depth_coarse", "depth_fine"):
            d = getattr(self, name)
            if not (0 <= d <= 8):
                raise ConfigError(f"{name}={d} outside 0..8")
        if not (self.depth_start <= self.depth_coarse <= self.depth_fine):
            raise ConfigError("depths must satisfy start <= coarse <= fine")
        if self.schedule_steps < 1:
            raise ConfigError("schedule_steps must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("betas must satisfy 0 < start <= end < 1")
        if not (1 <= self.restart_step <= self.schedule_steps):
            raise ConfigError("restart_step must lie in 1..schedule_steps")
        if self.timestep_dim % 2 != 0:
            raise ConfigError("timestep_dim must be even")
        positive = (
            "corpus_size", "dense_points", "cloud_points", "latent_width",
            "part_feature_width", "encoder_hidden", "attention_dk", "fine_blocks",
            "fine_width", "unet_width", "decoder_hidden", "batch_size",
            "queries_per_step", "checkpoint_every", "mesh_resolution",
            "eval_resolution", "eval_points",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("steps_latent", "steps_scale1", "steps_scale2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.cloud_points > self.dense_points:
            raise ConfigError("cloud_points cannot exceed dense_points")
        if self.batch_size > self.corpus_size:
            raise ConfigError("batch_size cannot exceed corpus_size")
        if self.learning_rate <= 0 or self.latent_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {key}: {exc}") from None


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then file keys, then ``key=value`` overrides; validated."""
    values = {}
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r}: expected key=value")
        key, val = (s.strip() for s in ov.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"override: unknown key {key!r}")
        values[key] = _parse_value(key, val)
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()
