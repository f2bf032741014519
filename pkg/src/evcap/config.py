"""Flat key=value run configuration with environment and CLI overrides.

Precedence: built-in defaults < config file < EVCAP_* environment
variables < explicit --set overrides. The canonical serialized form (every
key, sorted) is hashed so any artifact can be traced to one configuration.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace

from .data import CHANNELS
from .errors import ConfigError
from .model import ModelHyper
from .synthgen import FleetConfig

ENV_PREFIX = "EVCAP_"


@dataclass(frozen=True)
class RunConfig:
    # model and training (defaults follow the reference setup)
    t_steps: int = 128
    channels: int = 7
    d_f: int = 32
    d_h: int = 128
    temperature: float = 0.1
    mask_ratio: float = 0.5
    mean_masked_run: float = 3.0
    batch_size: int = 32
    pretrain_epochs: int = 50
    finetune_epochs: int = 200
    patience: int = 20
    peak_lr: float = 0.01
    warmup_frac: float = 0.05
    contrastive_enabled: bool = True
    freeze_encoder: bool = False
    seed: int = 0
    seeds: str = "0,1,2,3,4"
    # synthetic fleet
    n_vehicles: int = 30
    snippets_per_vehicle: int = 24
    manufacturer_id: str = "EVM1"
    rated_capacity_ah: float = 150.0
    fade_per_1000km: float = 0.0004
    fast_fade_multiplier: float = 2.0
    fast_charge_fraction: float = 0.2
    mileage_min_km: float = 0.0
    mileage_max_km: float = 200_000.0
    noise_std: float = 0.5
    manufacturer_offsets: str = ""
    # companion corpora emitted by `gen`
    gen_transfer: bool = True
    transfer_manufacturer_id: str = "EVM3"
    transfer_n_vehicles: int = 12
    transfer_rated_capacity_ah: float = 140.0
    transfer_offsets: str = "current_a:1.05:0.4,temp_max_c:1.0:2.5,voltage_max_v:1.0:-1.5"
    gen_novel: bool = True
    novel_manufacturer_id: str = "EVM2"
    # artifacts
    data_path: str = "fleet.csv"
    transfer_data_path: str = "transfer_fleet.csv"
    novel_data_path: str = "novel.csv"
    manifest_path: str = "manifest.csv"
    transfer_manifest_path: str = "transfer_manifest.csv"
    checkpoint_path: str = "pretrained.ckpt"
    finetuned_path: str = "finetuned.ckpt"
    corpus_variant: str = "d1_full"
    target_distribution: str = "D1"
    protocol: str = "age_shift"
    out_dir: str = "."

    def seed_list(self) -> list[int]:
        try:
            return [int(v) for v in self.seeds.split(",") if v.strip() != ""]
        except ValueError:
            raise ConfigError(f"seeds must be comma-separated integers, got {self.seeds!r}") from None

    def hyper(self) -> ModelHyper:
        return ModelHyper(t_steps=self.t_steps, channels=self.channels, d_f=self.d_f, d_h=self.d_h)

    def fleet_config(self) -> FleetConfig:
        return FleetConfig(
            n_vehicles=self.n_vehicles,
            snippets_per_vehicle=self.snippets_per_vehicle,
            manufacturer_id=self.manufacturer_id,
            seed=self.seed,
            rated_capacity_ah=self.rated_capacity_ah,
            fade_per_1000km=self.fade_per_1000km,
            fast_fade_multiplier=self.fast_fade_multiplier,
            fast_charge_fraction=self.fast_charge_fraction,
            mileage_range_km=(self.mileage_min_km, self.mileage_max_km),
            noise_std=self.noise_std,
            manufacturer_offsets=parse_offsets(self.manufacturer_offsets),
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def parse_offsets(text: str) -> dict[str, tuple[float, float]]:
    """Parse 'channel:gain:bias,channel:gain:bias,...' offset strings."""
    out: dict[str, tuple[float, float]] = {}
    if not text.strip():
        return out
    for part in text.split(","):
        pieces = part.strip().split(":")
        if len(pieces) != 3:
            raise ConfigError(f"offset entry must be channel:gain:bias, got {part!r}")
        name, gain, bias = pieces
        if name not in CHANNELS:
            raise ConfigError(f"unknown channel {name!r} in offsets")
        try:
            out[name] = (float(gain), float(bias))
        except ValueError:
            raise ConfigError(f"non-numeric offset in {part!r}") from None
    return out


def _coerce(name: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {name}={raw!r} as {kind.__name__}") from None


def _field_types() -> dict[str, type]:
    return {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    config = base or RunConfig()
    types = _field_types()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _coerce(key, value, types[key])
    return replace(config, **updates)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def apply_env_overrides(config: RunConfig, environ=os.environ) -> RunConfig:
    types = _field_types()
    updates = {}
    for name, kind in types.items():
        env_key = ENV_PREFIX + name.upper()
        if env_key in environ:
            updates[name] = _coerce(name, environ[env_key], kind)
    return replace(config, **updates) if updates else config


def apply_set_overrides(config: RunConfig, assignments: list[str]) -> RunConfig:
    types = _field_types()
    updates = {}
    for assignment in assignments:
        key, sep, value = assignment.partition("=")
        if not sep or key not in types:
            raise ConfigError(f"--set expects known key=value, got {assignment!r}")
        updates[key] = _coerce(key, value, types[key])
    return replace(config, **updates) if updates else config
