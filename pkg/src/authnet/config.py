"""Run configuration: defaults, key=value files and override parsing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model and data
    arch: str = "lenet"
    dataset: str = "mnist"  # or "synthetic"
    data_dir: str = "data/mnist"
    train_subset: int = 0  # 0 keeps every training image
    test_subset: int = 0
    synth_k: int = 10
    synth_per_class: int = 100
    synth_separation: float = 1.0
    seed: int = 0
    out_dir: str = "runs/default"
    # clean training
    clean_lr: float = 1e-3
    clean_epochs: int = 5
    clean_batch: int = 128
    # key inversion (LeNet column of the hyper-parameter table)
    seg_stage: int = 3
    seg_index: int = -1  # explicit flat layer index; overrides seg_stage when >= 0
    auth_bits: int = 5
    gamma: float = 2.0
    eps_m: float = 0.5
    eps_u: float = 0.5
    lr_m: float = 0.01
    lr_u: float = 0.003
    inv_iters: int = 300
    inv_batch: int = 256
    inv_per_class: int = 200
    mask_mode: str = "deviation"
    # tail fine-tuning
    ft_lr: float = 0.01
    ft_epochs: int = 10
    ft_batch: int = 256
    ft_decay: float = 0.1
    ft_decay_period: int = 10
    # evaluation and certification
    timing_reps: int = 10
    cert_samples: int = 100
    cert_eps_hi: float = 0.5
    cert_tol: float = 1e-5
    cert_method: str = "crown"
    refuse_keys: int = 20
    refuse_points: int = 100
    refuse_images: int = 100
    # attacks
    diff_n: int = 100
    defense_strength: float = 0.5
    attack_fraction: float = 0.2
    maskopt_epochs: int = 5
    offset_rounds: int = 10000
    offset_lr: float = 1e-3
    ftattack_epochs: int = 3
    ftattack_lr: float = 1e-4
    extract_queries: int = 10000
    extract_epochs: int = 5
    extract_lr: float = 1e-3
    extract_loss: str = "mse-soft-label"
    extract_source: str = "in-domain"

    def __post_init__(self):
        choices = {
            "dataset": ("mnist", "synthetic"),
            "mask_mode": ("deviation", "literal"),
            "cert_method": ("crown", "crown-full", "ibp"),
            "extract_loss": ("mse-soft-label", "cross-entropy-soft-label"),
            "extract_source": ("in-domain", "out-of-domain"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("eps_m", "eps_u", "clean_lr", "ft_lr", "lr_m", "lr_u", "cert_tol", "cert_eps_hi"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.auth_bits < 1:
            raise ConfigError("auth_bits must be >= 1")
        if not 0 < self.attack_fraction <= 1:
            raise ConfigError("attack_fraction must be in (0, 1]")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)!r}" if isinstance(getattr(self, f.name), float)
                else f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    def dump(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    if name not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    kind = {"int": int, "float": float, "str": str}[FIELD_TYPES[name]]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_pairs(lines) -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, val)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file, then ``key=value`` overrides (highest precedence)."""
    values = {}
    if path is not None:
        try:
            values.update(parse_pairs(Path(path).read_text().splitlines()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update(parse_pairs(overrides))
    return RunConfig(**values)
